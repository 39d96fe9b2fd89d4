use serde::{Deserialize, Serialize};

use super::DualResFeatures;
use crate::autograd::{concat, Element, Var};
use crate::error::{shape_err, Result};
use crate::nn::{global_avg_pool, join, pool_hw, upsample_hw, Conv3d, ConvBn, Init, Linear, ParamBuilder, Session};

/// `ReLU(x + BN(conv(ReLU(BN(conv(x))))))` with two 3x3x3 convolutions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub channels: usize,
    pub first: ConvBn,
    pub second: ConvBn,
}

impl ResidualBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let k3 = |pb: &mut ParamBuilder<'_, T>, n: &str| Conv3d::k3(pb, n, channels, channels, [1; 3], false);
        Self {
            channels,
            first: ConvBn::new(pb, &join(name, "conv1"), k3, true),
            second: ConvBn::new(pb, &join(name, "conv2"), k3, false),
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.ndim() != 5 || x.shape()[1] != self.channels {
            return Err(shape_err!("residual block over {:?}, expected {} channels", x.shape(), self.channels));
        }
        let y = self.second.forward(s, &self.first.forward(s, x)?)?;
        Ok(y.add(x)?.relu())
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }

    pub fn macs(&self, voxels: usize) -> u64 {
        self.first.conv.macs(voxels) + self.second.conv.macs(voxels)
    }
}

/// `sigmoid(W2 ReLU(W1 GAP(x)))`, hidden width `C / r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelGate {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(pb, &join(name, "fc1"), channels, hidden, true, Init::KaimingNormal { fan_in: channels }),
            fc2: Linear::new(pb, &join(name, "fc2"), hidden, channels, true, Init::KaimingNormal { fan_in: hidden }),
        }
    }

    /// `(B, C, ..)` to gate coefficients `(B, C)` in (0, 1).
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(s, &global_avg_pool(x)?)?.relu();
        Ok(self.fc2.forward(s, &h)?.sigmoid())
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs(1) + self.fc2.macs(1)
    }
}

/// Two 3x3x3 conv-BN-ReLU layers fusing a stream with a gated partner, `2C -> C -> C`.
///
/// Channels are grouped in `group_width` slices; each group sees its slice of
/// the stream followed by the same slice of the partner. `group_width = C`
/// is the dense fusion over the plain concatenation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionConv {
    pub channels: usize,
    pub group_width: usize,
    pub first: ConvBn,
    pub second: ConvBn,
}

impl FusionConv {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, group_width: usize) -> Self {
        let groups = channels / group_width;
        let conv = |cin: usize| {
            move |pb: &mut ParamBuilder<'_, T>, n: &str| Conv3d::new(pb, n, cin, channels, [3; 3], [1; 3], [1; 3], groups, false)
        };
        Self {
            channels,
            group_width,
            first: ConvBn::new(pb, &join(name, "conv1"), conv(2 * channels), true),
            second: ConvBn::new(pb, &join(name, "conv2"), conv(channels), true),
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, own: &Var<T>, partner: &Var<T>) -> Result<Var<T>> {
        let sh = own.shape().to_vec();
        let g = self.channels / self.group_width;
        let mut split = vec![sh[0], g, self.group_width];
        split.extend_from_slice(&sh[2..]);
        let joined = concat(&[own.reshape(&split)?, partner.reshape(&split)?], 2)?;
        let mut merged = vec![sh[0], 2 * self.channels];
        merged.extend_from_slice(&sh[2..]);
        let y = self.first.forward(s, &joined.reshape(&merged)?)?;
        self.second.forward(s, &y)
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }

    pub fn macs(&self, voxels: usize) -> u64 {
        self.first.conv.macs(voxels) + self.second.conv.macs(voxels)
    }
}

/// Bilateral cross-resolution integration between the CNN and transformer streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bcim {
    pub channels: usize,
    pub gate_high: ChannelGate,
    pub gate_low: ChannelGate,
    pub fuse_high: FusionConv,
    pub fuse_low: FusionConv,
}

/// Intermediate values of one BCIM evaluation.
pub struct BcimTrace<T: Element> {
    pub out: DualResFeatures<T>,
    /// Gate from the high stream, `(B, C)`.
    pub c: Var<T>,
    /// Gate from the low stream, `(B, C)`.
    pub v: Var<T>,
}

impl Bcim {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize, group_width: usize) -> Self {
        Self {
            channels,
            gate_high: ChannelGate::new(pb, &join(name, "gate_high"), channels, reduction),
            gate_low: ChannelGate::new(pb, &join(name, "gate_low"), channels, reduction),
            fuse_high: FusionConv::new(pb, &join(name, "fuse_high"), channels, group_width),
            fuse_low: FusionConv::new(pb, &join(name, "fuse_low"), channels, group_width),
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, f: &DualResFeatures<T>) -> Result<DualResFeatures<T>> {
        Ok(self.trace(s, f)?.out)
    }

    pub fn trace<T: Element>(&self, s: &Session<'_, T>, f: &DualResFeatures<T>) -> Result<BcimTrace<T>> {
        f.check()?;
        if f.high.shape()[1] != self.channels {
            return Err(shape_err!("BCIM over {} channels, expected {}", f.high.shape()[1], self.channels));
        }
        let (hs, ls) = (f.high.shape().to_vec(), f.low.shape().to_vec());
        let (b, c) = (hs[0], hs[1]);
        let c_gate = self.gate_high.forward(s, &f.high)?;
        let v_gate = self.gate_low.forward(s, &f.low)?;
        let down = pool_hw(&f.high, ls[3], ls[4])?;
        let up = upsample_hw(&f.low, hs[3], hs[4])?;
        let bcast = |g: &Var<T>| g.reshape(&[b, c, 1, 1, 1]);
        let down_gated = down.mul(&bcast(&v_gate)?)?;
        let up_gated = up.mul(&bcast(&c_gate)?)?;
        let out = DualResFeatures {
            high: self.fuse_high.forward(s, &f.high, &up_gated)?,
            low: self.fuse_low.forward(s, &f.low, &down_gated)?,
        };
        Ok(BcimTrace { out, c: c_gate, v: v_gate })
    }

    pub fn num_params(&self) -> usize {
        self.gate_high.num_params() + self.gate_low.num_params() + self.fuse_high.num_params() + self.fuse_low.num_params()
    }

    pub fn macs(&self, high_voxels: usize, low_voxels: usize) -> u64 {
        self.gate_high.macs() + self.gate_low.macs() + self.fuse_high.macs(high_voxels) + self.fuse_low.macs(low_voxels)
    }
}
