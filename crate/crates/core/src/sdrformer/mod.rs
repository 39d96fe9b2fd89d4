//! The Siamese multi-phase model: one shared backbone over every phase, phase
//! fusion per resolution stream, and a linear head.

mod apsm;
mod checkpoint;
#[cfg(test)]
mod tests;

pub use apsm::{Apsm, PhaseFusion};
pub use checkpoint::{
    adapt_phase_count, read_tensors, transfer, write_tensors, Checkpoint, SurgeryReport, TensorEntry,
};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, concat, Element, Var};
use crate::drformer::{dual_inputs, ClassifierHead, DrFormerBackbone, DrFormerConfig, DualResFeatures, ModuleCost};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{global_avg_pool, pool_hw, ParamBuilder, ParamStore, Session, Stream};
use crate::volforge::MultiPhaseSample;

/// Where phase fusion happens relative to the merge of the two streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPlacement {
    /// One fusion per resolution stream, before the streams are merged.
    #[default]
    PerStream,
    /// Streams are merged per phase first; one fusion over `2C` channels.
    AfterMerge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdrFormerConfig {
    #[serde(default)]
    pub backbone: DrFormerConfig,
    pub n_phases: usize,
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub apsm_enabled: bool,
    #[serde(default = "yes")]
    pub bcim_enabled: bool,
    #[serde(default)]
    pub fusion: FusionPlacement,
}

fn yes() -> bool {
    true
}

impl Default for SdrFormerConfig {
    fn default() -> Self {
        Self {
            backbone: DrFormerConfig::default(),
            n_phases: 3,
            num_classes: 2,
            apsm_enabled: true,
            bcim_enabled: true,
            fusion: FusionPlacement::PerStream,
        }
    }
}

impl SdrFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phases == 0 {
            return Err(config_err!("n_phases must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be >= 2, got {}", self.num_classes));
        }
        self.backbone.validate()
    }

    /// Same model with both interaction modules removed.
    pub fn baseline(&self) -> Self {
        Self {
            apsm_enabled: false,
            bcim_enabled: false,
            ..self.clone()
        }
    }

    pub fn with_phases(&self, n_phases: usize) -> Self {
        Self {
            n_phases,
            ..self.clone()
        }
    }

    /// True when phase fusion (and with it APSM) is active.
    pub fn fuses_phases(&self) -> bool {
        self.n_phases > 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Fusion {
    /// Single phase: backbone features feed the head directly.
    Bypass,
    PerStream { high: PhaseFusion, low: PhaseFusion },
    AfterMerge(PhaseFusion),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdrFormer {
    pub cfg: SdrFormerConfig,
    pub backbone: DrFormerBackbone,
    pub fusion: Fusion,
    pub head: ClassifierHead,
}

impl SdrFormer {
    /// Registers all parameters under `backbone.*`, `fusion.*` and `head.*`.
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: &SdrFormerConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = DrFormerBackbone::new(pb, "backbone", &cfg.backbone, cfg.bcim_enabled)?;
        let c = cfg.backbone.final_channels();
        let n = cfg.n_phases;
        let fusion = match (n, cfg.fusion) {
            (1, _) => Fusion::Bypass,
            (_, FusionPlacement::PerStream) => Fusion::PerStream {
                high: PhaseFusion::new(pb, "fusion.high", n, c, cfg.apsm_enabled)?,
                low: PhaseFusion::new(pb, "fusion.low", n, c, cfg.apsm_enabled)?,
            },
            (_, FusionPlacement::AfterMerge) => Fusion::AfterMerge(PhaseFusion::new(pb, "fusion.merged", n, 2 * c, cfg.apsm_enabled)?),
        };
        let head = ClassifierHead::new(pb, "head", c, cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            fusion,
            head,
        })
    }

    /// Builds the model and a freshly initialized parameter store.
    pub fn init<T: Element>(cfg: &SdrFormerConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut ParamBuilder::new(&mut store, seed), cfg)?;
        Ok((model, store))
    }

    /// Backbone features for every phase, phase axis folded into the batch:
    /// `x (B, N, Cin, D, H, W)` to maps of batch `B * N`, phase-minor.
    pub fn phase_features<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<DualResFeatures<T>> {
        let sh = x.shape();
        let cin = self.cfg.backbone.in_channels;
        if sh.len() != 6 || sh[2] != cin {
            return Err(shape_err!("model input {sh:?}, expected (B, N, {cin}, D, H, W)"));
        }
        if sh[1] != self.cfg.n_phases {
            return Err(shape_err!("input has {} phases, model was built for {}", sh[1], self.cfg.n_phases));
        }
        let folded = x.reshape(&[sh[0] * sh[1], cin, sh[3], sh[4], sh[5]])?;
        let (high, low) = dual_inputs(&folded)?;
        self.backbone.forward(s, &high, &low)
    }

    /// `x (B, N, Cin, D, H, W)` to logits `(B, K)`. APSM coefficients are
    /// recorded on the session.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let f = self.phase_features(s, x)?;
        let b = x.shape()[0];
        match &self.fusion {
            Fusion::Bypass => self.head.forward(s, &f),
            Fusion::PerStream { high, low } => {
                let fused = DualResFeatures {
                    high: high.forward(s, &unfold_phases(&f.high, b)?, Stream::High)?,
                    low: low.forward(s, &unfold_phases(&f.low, b)?, Stream::Low)?,
                };
                self.head.forward(s, &fused)
            }
            Fusion::AfterMerge(fusion) => {
                let ls = f.low.shape();
                let merged = concat(&[pool_hw(&f.high, ls[3], ls[4])?, f.low.clone()], 1)?;
                let v = fusion.forward(s, &unfold_phases(&merged, b)?, Stream::Merged)?;
                self.head.fc.forward(s, &global_avg_pool(&v)?)
            }
        }
    }

    /// Copies branch 0 of every APSM into all other branches, so identical
    /// phases give identical descriptors.
    pub fn tie_apsm_branches<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let fusions: Vec<&PhaseFusion> = match &self.fusion {
            Fusion::Bypass => vec![],
            Fusion::PerStream { high, low } => vec![high, low],
            Fusion::AfterMerge(f) => vec![f],
        };
        for apsm in fusions.into_iter().filter_map(|f| f.apsm.as_ref()) {
            let first = &apsm.branches[0];
            let w0 = store.value(&first.weight)?.clone();
            let b0 = first.bias.as_ref().map(|b| store.value(b).cloned()).transpose()?;
            for br in &apsm.branches[1..] {
                store.set_value(&br.weight, w0.clone())?;
                if let (Some(name), Some(v)) = (&br.bias, &b0) {
                    store.set_value(name, v.clone())?;
                }
            }
        }
        Ok(())
    }

    pub fn phase_fusions(&self) -> Vec<(&'static str, &PhaseFusion)> {
        match &self.fusion {
            Fusion::Bypass => vec![],
            Fusion::PerStream { high, low } => vec![("fusion.high", high), ("fusion.low", low)],
            Fusion::AfterMerge(f) => vec![("fusion.merged", f)],
        }
    }

    /// Analytic per-module costs for one sample of `dims` per phase. Backbone
    /// MACs are counted once per phase, its parameters once.
    pub fn costs(&self, dims: [usize; 3]) -> Result<Vec<ModuleCost>> {
        self.cfg.backbone.check_input(dims)?;
        let n = self.cfg.n_phases as u64;
        let mut out: Vec<ModuleCost> = self
            .backbone
            .costs("backbone", dims)
            .into_iter()
            .map(|c| ModuleCost { macs: c.macs * n, ..c })
            .collect();
        let last = *self.cfg.backbone.stage_dims(dims).last().unwrap();
        let high_vox = last.iter().product::<usize>();
        let low_vox = high_vox / 4;
        for (name, f) in self.phase_fusions() {
            let vox = if name == "fusion.high" { high_vox } else { low_vox };
            if let Some(apsm) = &f.apsm {
                out.push(ModuleCost {
                    module: format!("{name}.apsm"),
                    macs: f.apsm_macs(),
                    params: apsm.num_params(),
                });
            }
            out.push(ModuleCost {
                module: format!("{name}.w3"),
                macs: f.w3_macs(vox),
                params: f.w3.num_params(),
            });
        }
        out.push(self.head.cost("head"));
        Ok(out)
    }
}

/// `(B * N, C, ..)` with phases minor to the phase concatenation `(B, N * C, ..)`.
pub fn unfold_phases<T: Element>(x: &Var<T>, batch: usize) -> Result<Var<T>> {
    let sh = x.shape();
    if batch == 0 || sh[0] % batch != 0 {
        return Err(shape_err!("cannot unfold {sh:?} into batch {batch}"));
    }
    let mut to = vec![batch, sh[0] / batch * sh[1]];
    to.extend_from_slice(&sh[2..]);
    x.reshape(&to)
}

/// Stacks samples into `(B, N, 1, D, H, W)`. All samples must share dims and phase count.
pub fn stack_samples<T: Element>(samples: &[&MultiPhaseSample]) -> Result<ArrayD<T>> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (n, dims) = (first.n_phases(), first.dims());
    let mut data = Vec::with_capacity(samples.len() * n * dims.iter().product::<usize>());
    for s in samples {
        if s.n_phases() != n || s.dims() != dims {
            return Err(shape_err!(
                "sample `{}` has {} phases of {:?}, batch expects {n} of {dims:?}",
                s.sample_id,
                s.n_phases(),
                s.dims()
            ));
        }
        for p in &s.phases {
            data.extend(p.voxels.iter().map(|&v| cast::<T>(v as f64)));
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[samples.len(), n, 1, dims[0], dims[1], dims[2]]), data).expect("sizes checked"))
}

/// APSM coefficients of one sample and stream, `coefficients[k][j]` for phase `k`, channel `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseAttentionRecord {
    pub stream: Stream,
    pub sample_id: String,
    pub coefficients: Vec<Vec<f64>>,
}

impl PhaseAttentionRecord {
    /// Splits a recorded `(B, N, C)` coefficient tensor into per-sample records.
    pub fn from_batch<T: Element>(stream: Stream, p: &ArrayD<T>, sample_ids: &[String]) -> Result<Vec<Self>> {
        let sh = p.shape();
        if sh.len() != 3 || sh[0] != sample_ids.len() {
            return Err(shape_err!("coefficients {sh:?} for {} samples", sample_ids.len()));
        }
        Ok(sample_ids
            .iter()
            .enumerate()
            .map(|(b, id)| Self {
                stream,
                sample_id: id.clone(),
                coefficients: (0..sh[1])
                    .map(|k| (0..sh[2]).map(|j| p[[b, k, j]].to_f64().unwrap()).collect())
                    .collect(),
            })
            .collect())
    }

    pub fn n_phases(&self) -> usize {
        self.coefficients.len()
    }

    /// Mean coefficient of each phase over channels.
    pub fn phase_means(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    /// Per-channel sums to 1 within `tol`, every entry in (0, 1).
    pub fn validate(&self, tol: f64) -> Result<()> {
        let c = self.coefficients.first().map_or(0, Vec::len);
        for j in 0..c {
            let sum: f64 = self.coefficients.iter().map(|row| row[j]).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Metric(format!("channel {j} coefficients sum to {sum}")));
            }
        }
        if self.coefficients.iter().flatten().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Metric("coefficient outside (0, 1)".into()));
        }
        Ok(())
    }
}

/// Records for every APSM call captured on `s`, in call order.
pub fn collect_records<T: Element>(s: &Session<'_, T>, sample_ids: &[String]) -> Result<Vec<PhaseAttentionRecord>> {
    let mut out = Vec::new();
    for (stream, p) in s.phase_weights() {
        out.extend(PhaseAttentionRecord::from_batch(stream, &p, sample_ids)?);
    }
    Ok(out)
}
