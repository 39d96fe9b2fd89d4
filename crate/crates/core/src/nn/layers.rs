use serde::{Deserialize, Serialize};

use super::params::{join, Init, Mode, NormUpdate, ParamBuilder, ParamKind, Session};
use crate::autograd::{self, BatchNormStats, ConvGeometry, Element, Var};
use crate::error::{shape_err, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 3D convolution layer over `(B, C, D, H, W)` inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv3d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub geom: ConvGeometry,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels / groups * kernel.iter().product::<usize>();
        let weight = pb.add(
            &join(name, "weight"),
            &[out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]],
            Init::KaimingNormal { fan_in },
            ParamKind::Weight,
        );
        let bias = bias.then(|| pb.add(&join(name, "bias"), &[out_channels], Init::Zeros, ParamKind::NoDecay));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry {
                stride,
                padding,
                groups,
            },
        }
    }

    /// 3x3x3 convolution, padding 1, with the given stride.
    pub fn k3<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: [usize; 3],
        bias: bool,
    ) -> Self {
        Self::new(pb, name, in_channels, out_channels, [3; 3], stride, [1; 3], 1, bias)
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        autograd::conv3d(x, &w, b.as_ref(), self.geom)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.geom.output_dims(input, self.kernel)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels / self.geom.groups) * self.kernel.iter().product::<usize>()
            + self.bias.as_ref().map_or(0, |_| self.out_channels)
    }

    /// Multiply-accumulates for one sample producing `out_voxels` outputs.
    pub fn macs(&self, out_voxels: usize) -> u64 {
        (self.kernel.iter().product::<usize>() * (self.in_channels / self.geom.groups) * self.out_channels) as u64
            * out_voxels as u64
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        pb.add(&join(name, "weight"), &[channels], Init::Ones, ParamKind::NoDecay);
        pb.add(&join(name, "bias"), &[channels], Init::Zeros, ParamKind::NoDecay);
        pb.add(&join(name, "running_mean"), &[channels], Init::Zeros, ParamKind::Buffer);
        pb.add(&join(name, "running_var"), &[channels], Init::Ones, ParamKind::Buffer);
        Self {
            prefix: name.to_string(),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = s.param(&join(&self.prefix, "weight"))?;
        let beta = s.param(&join(&self.prefix, "bias"))?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = autograd::batch_norm(x, &gamma, &beta, BatchNormStats::Batch, NORM_EPS)?;
                if let Some((batch_mean, batch_var)) = stats {
                    s.push_update(NormUpdate {
                        prefix: self.prefix.clone(),
                        batch_mean,
                        batch_var,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(&join(&self.prefix, "running_mean"))?;
                let var = s.buffer(&join(&self.prefix, "running_var"))?;
                let stats = BatchNormStats::Running {
                    mean: mean.as_slice().unwrap(),
                    var: var.as_slice().unwrap(),
                };
                Ok(autograd::batch_norm(x, &gamma, &beta, stats, NORM_EPS)?.0)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub prefix: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        pb.add(&join(name, "weight"), &[channels], Init::Ones, ParamKind::NoDecay);
        pb.add(&join(name, "bias"), &[channels], Init::Zeros, ParamKind::NoDecay);
        Self {
            prefix: name.to_string(),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = s.param(&join(&self.prefix, "weight"))?;
        let beta = s.param(&join(&self.prefix, "bias"))?;
        autograd::layer_norm(x, &gamma, &beta, NORM_EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = pb.add(&join(name, "weight"), &[out_features, in_features], init, ParamKind::Weight);
        let bias = bias.then(|| pb.add(&join(name, "bias"), &[out_features], Init::Zeros, ParamKind::NoDecay));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        autograd::linear(x, &w, b.as_ref())
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.bias.as_ref().map_or(0, |_| self.out_features)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (self.in_features * self.out_features * rows) as u64
    }
}

/// A 1x1x1 convolution applied to globally pooled `(B, C)` descriptors.
///
/// The weight keeps the convolution layout `(out, in, 1, 1, 1)`; evaluating it
/// after global average pooling is exact because both maps are linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointwiseConv {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PointwiseConv {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    ) -> Self {
        let weight = pb.add(
            &join(name, "weight"),
            &[out_channels, in_channels, 1, 1, 1],
            Init::KaimingNormal { fan_in: in_channels },
            ParamKind::Weight,
        );
        let bias = bias.then(|| pb.add(&join(name, "bias"), &[out_channels], Init::Zeros, ParamKind::NoDecay));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    /// `x (B, in)` to `(B, out)`.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.ndim() != 2 || x.shape()[1] != self.in_channels {
            return Err(shape_err!("pointwise conv over {:?}, expected (B, {})", x.shape(), self.in_channels));
        }
        let w = s.param(&self.weight)?.reshape(&[self.out_channels, self.in_channels])?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        autograd::linear(x, &w, b.as_ref())
    }

    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels + self.bias.as_ref().map_or(0, |_| self.out_channels)
    }
}

/// Convolution followed by batch normalization and optional ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: Conv3d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, conv: impl FnOnce(&mut ParamBuilder<'_, T>, &str) -> Conv3d, relu: bool) -> Self {
        let conv = conv(pb, &join(name, "conv"));
        let bn = BatchNorm::new(pb, &join(name, "bn"), conv.out_channels);
        Self { conv, bn, relu }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.bn.forward(s, &self.conv.forward(s, x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

/// Global average pooling of `(B, C, ..)` to `(B, C)`.
pub fn global_avg_pool<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(shape_err!("global pooling of {s:?}"));
    }
    let axes: Vec<usize> = (2..s.len()).collect();
    x.mean_keep(&axes).reshape(&[s[0], s[1]])
}

/// Average pools `(B, C, D, H, W)` in H and W to the given size.
pub fn pool_hw<T: Element>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let y = autograd::adaptive_avg_pool_axis(x, 3, h)?;
    autograd::adaptive_avg_pool_axis(&y, 4, w)
}

/// Linearly resamples `(B, C, D, H, W)` in H and W to the given size.
pub fn upsample_hw<T: Element>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let y = autograd::linear_resize_axis(x, 3, h)?;
    autograd::linear_resize_axis(&y, 4, w)
}

/// `(B, C, D, H, W)` to channel-last `(B, D, H, W, C)`.
pub fn to_channels_last<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 2, 3, 4, 1])
}

/// Channel-last `(B, D, H, W, C)` back to `(B, C, D, H, W)`.
pub fn to_channels_first<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    x.permute(&[0, 4, 1, 2, 3])
}
