use serde::{Deserialize, Serialize};

use super::{AttentionConfig, MultiHeadAttention};
use crate::autograd::{Element, Var};
use crate::error::Result;
use crate::nn::{join, to_channels_first, to_channels_last, Init, LayerNorm, Linear, ParamBuilder, Session};

/// Pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(.))` with a GELU hidden layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let hidden = channels * mlp_ratio.max(1);
        let init = Init::TruncNormal { std: 0.02 };
        Ok(Self {
            norm1: LayerNorm::new(pb, &join(name, "norm1"), channels),
            attn: MultiHeadAttention::new(pb, &join(name, "attn"), channels, cfg)?,
            norm2: LayerNorm::new(pb, &join(name, "norm2"), channels),
            fc1: Linear::new(pb, &join(name, "mlp.fc1"), channels, hidden, true, init),
            fc2: Linear::new(pb, &join(name, "mlp.fc2"), hidden, channels, true, init),
        })
    }

    /// Channel-last `(B, D, H, W, C)` in and out.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.attn.forward(s, &self.norm1.forward(s, x)?)?;
        let x = x.add(&a)?;
        let h = self.fc1.forward(s, &self.norm2.forward(s, &x)?)?.gelu();
        x.add(&self.fc2.forward(s, &h)?)
    }

    /// Channel-first `(B, C, D, H, W)` in and out.
    pub fn forward_channels_first<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        to_channels_first(&self.forward(s, &to_channels_last(x)?)?)
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params() + self.attn.num_params() + self.norm2.num_params() + self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn macs(&self, dims: [usize; 3]) -> u64 {
        let l = dims.iter().product::<usize>();
        self.attn.macs(dims) + self.fc1.macs(l) + self.fc2.macs(l)
    }
}
