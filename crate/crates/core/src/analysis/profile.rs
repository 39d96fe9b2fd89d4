use serde::{Deserialize, Serialize};

use crate::drformer::ModuleCost;
use crate::error::{config_err, shape_err, Result};
use crate::sdrformer::{SdrFormer, SdrFormerConfig};

/// Analytic cost of one sample. FLOPs are 2 x MACs; normalization,
/// activation and softmax arithmetic is not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_dims: [usize; 3],
    pub n_phases: usize,
    pub macs: u64,
    pub flops_g: f64,
    pub params: usize,
    pub params_m: f64,
    /// Sums to `macs` and `params`.
    pub breakdown: Vec<ModuleCost>,
    /// Present when the profiled config enables BCIM or APSM.
    pub baseline: Option<BaselineComparison>,
}

/// Cost of the same config with BCIM and APSM switched off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub macs: u64,
    pub params: usize,
    pub flops_g: f64,
    pub params_m: f64,
    /// `(full - baseline) / baseline`.
    pub flops_overhead: f64,
    pub params_overhead: f64,
}

pub const FLOPS_CONVENTION: &str = "FLOPs = 2 x multiply-accumulates; BN, activation and softmax ops not counted";

fn count(cfg: &SdrFormerConfig, dims: [usize; 3]) -> Result<(u64, usize, Vec<ModuleCost>)> {
    let (model, store) = SdrFormer::init::<f32>(cfg, 0)?;
    let breakdown = model.costs(dims)?;
    let params: usize = breakdown.iter().map(|c| c.params).sum();
    let direct = store.num_trainable();
    if params != direct {
        return Err(config_err!(
            "cost model covers {params} of {direct} trainable parameters; some layer type is unsupported by the profiler"
        ));
    }
    Ok((breakdown.iter().map(|c| c.macs).sum(), params, breakdown))
}

/// Profiles `cfg` for one multi-phase sample with per-phase dims `dims`.
pub fn profile(cfg: &SdrFormerConfig, dims: [usize; 3]) -> Result<ComplexityReport> {
    cfg.validate()?;
    let (macs, params, breakdown) = count(cfg, dims)?;
    let baseline = if cfg.apsm_enabled || cfg.bcim_enabled {
        let (bm, bp, _) = count(&cfg.baseline(), dims)?;
        Some(BaselineComparison {
            macs: bm,
            params: bp,
            flops_g: 2.0 * bm as f64 / 1e9,
            params_m: bp as f64 / 1e6,
            flops_overhead: (macs as f64 - bm as f64) / bm as f64,
            params_overhead: (params as f64 - bp as f64) / bp as f64,
        })
    } else {
        None
    };
    Ok(ComplexityReport {
        input_dims: dims,
        n_phases: cfg.n_phases,
        macs,
        flops_g: 2.0 * macs as f64 / 1e9,
        params,
        params_m: params as f64 / 1e6,
        breakdown,
        baseline,
    })
}

/// Profiles a full input shape `(B, N, Cin, D, H, W)`; the report is per sample.
pub fn profile_input(cfg: &SdrFormerConfig, shape: &[usize]) -> Result<ComplexityReport> {
    if shape.len() != 6 || shape[0] == 0 {
        return Err(shape_err!("input shape {shape:?}, expected (B, N, Cin, D, H, W)"));
    }
    if shape[1] != cfg.n_phases || shape[2] != cfg.backbone.in_channels {
        return Err(shape_err!(
            "input shape {shape:?} does not match {} phases of {} channels",
            cfg.n_phases,
            cfg.backbone.in_channels
        ));
    }
    profile(cfg, [shape[3], shape[4], shape[5]])
}

impl ComplexityReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# {FLOPS_CONVENTION}\ninput {}x{}x{} per phase, {} phases\nFLOPs {:.3} G  params {:.3} M\n",
            self.input_dims[0], self.input_dims[1], self.input_dims[2], self.n_phases, self.flops_g, self.params_m
        );
        if let Some(b) = &self.baseline {
            s += &format!(
                "baseline FLOPs {:.3} G  params {:.3} M  overhead FLOPs {:+.3}%  params {:+.3}%\n",
                b.flops_g,
                b.params_m,
                100.0 * b.flops_overhead,
                100.0 * b.params_overhead
            );
        }
        for c in &self.breakdown {
            s += &format!("{:<40} {:>14} MACs {:>10} params\n", c.module, c.macs, c.params);
        }
        s
    }
}
