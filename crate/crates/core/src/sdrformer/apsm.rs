use serde::{Deserialize, Serialize};

use crate::autograd::{concat, softmax_last, Element, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{global_avg_pool, join, Conv3d, ConvBn, ParamBuilder, PointwiseConv, Session, Stream};

/// Adaptive phase selection: per-channel softmax weights over phases.
///
/// The 1x1x1 reduction conv runs after global pooling; see [`PointwiseConv`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Apsm {
    pub n_phases: usize,
    pub channels: usize,
    pub reduce: PointwiseConv,
    pub branches: Vec<PointwiseConv>,
}

impl Apsm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, n_phases: usize, channels: usize) -> Self {
        let nc = n_phases * channels;
        let reduce = PointwiseConv::new(pb, &join(name, "reduce"), nc, channels, true);
        let branches = (0..n_phases)
            .map(|k| PointwiseConv::new(pb, &join(name, &format!("branch.{k}")), channels, channels, true))
            .collect();
        Self {
            n_phases,
            channels,
            reduce,
            branches,
        }
    }

    /// Phase descriptors `M_k` stacked as `(B, N, C)` for `x (B, N*C, ..)`.
    pub fn descriptors<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = x.shape()[0];
        let m = self.reduce.forward(s, &global_avg_pool(x)?)?;
        let per_phase = self
            .branches
            .iter()
            .map(|br| br.forward(s, &m)?.reshape(&[b, 1, self.channels]))
            .collect::<Result<Vec<_>>>()?;
        concat(&per_phase, 1)
    }

    /// Coefficients `p (B, N, C)`; every `p[b, .., j]` sums to 1.
    pub fn coefficients<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let m = self.descriptors(s, x)?;
        softmax_last(&m.permute(&[0, 2, 1])?).permute(&[0, 2, 1])
    }

    /// Scales each phase slice of `x (B, N*C, D, H, W)` by its coefficients.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let sh = x.shape().to_vec();
        let (b, n, c) = (sh[0], self.n_phases, self.channels);
        let p = self.coefficients(s, x)?;
        let mut split = vec![b, n, c];
        split.extend_from_slice(&sh[2..]);
        let weighted = x.reshape(&split)?.mul(&p.reshape(&[b, n, c, 1, 1, 1])?)?.reshape(&sh)?;
        Ok((weighted, p))
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.branches.iter().map(PointwiseConv::num_params).sum::<usize>()
    }

    pub fn macs(&self) -> u64 {
        let c = self.channels as u64;
        c * c * (self.n_phases as u64) * 2
    }
}

/// Fuses N same-shape phase maps into one: optional APSM weighting, then
/// `W3` (3x3x3 conv + BN + ReLU, `N*C -> C`) over the phase concatenation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseFusion {
    pub n_phases: usize,
    pub channels: usize,
    pub apsm: Option<Apsm>,
    pub w3: ConvBn,
}

impl PhaseFusion {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        n_phases: usize,
        channels: usize,
        apsm_enabled: bool,
    ) -> Result<Self> {
        if n_phases < 2 {
            return Err(config_err!("phase fusion needs at least 2 phases, got {n_phases}; single-phase input bypasses it"));
        }
        let apsm = apsm_enabled.then(|| Apsm::new(pb, &join(name, "apsm"), n_phases, channels));
        let nc = n_phases * channels;
        let w3 = ConvBn::new(pb, &join(name, "w3"), |pb, n| Conv3d::k3(pb, n, nc, channels, [1; 3], false), true);
        Ok(Self {
            n_phases,
            channels,
            apsm,
            w3,
        })
    }

    /// `x (B, N*C, D, H, W)`, phases in channel-block order, to `V (B, C, D, H, W)`.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>, stream: Stream) -> Result<Var<T>> {
        let sh = x.shape();
        if sh.len() != 5 || sh[1] != self.n_phases * self.channels {
            return Err(shape_err!(
                "phase fusion over {sh:?}, expected {} phases of {} channels",
                self.n_phases,
                self.channels
            ));
        }
        let fused_in = match &self.apsm {
            Some(apsm) => {
                let (weighted, p) = apsm.forward(s, x)?;
                s.record_phase_weights(stream, p.value());
                weighted
            }
            None => x.clone(),
        };
        self.w3.forward(s, &fused_in)
    }

    pub fn num_params(&self) -> usize {
        self.apsm.as_ref().map_or(0, Apsm::num_params) + self.w3.num_params()
    }

    pub fn apsm_macs(&self) -> u64 {
        self.apsm.as_ref().map_or(0, Apsm::macs)
    }

    pub fn w3_macs(&self, voxels: usize) -> u64 {
        self.w3.conv.macs(voxels)
    }
}
