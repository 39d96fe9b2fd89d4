//! Dual-resolution backbone: a residual 3D CNN on the high-resolution stream,
//! a 3D transformer on the half-resolution stream, and BCIM coupling at the end
//! of every stage.

mod blocks;

pub use blocks::{Bcim, BcimTrace, ChannelGate, FusionConv, ResidualBlock};

use serde::{Deserialize, Serialize};

use crate::attention3d::{AttentionConfig, AttentionVariant, TransformerBlock};
use crate::autograd::{concat, Element, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    global_avg_pool, join, pool_hw, to_channels_first, to_channels_last, Conv3d, ConvBn, Init, LayerNorm, Linear,
    ParamBuilder, Session,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrFormerConfig {
    #[serde(default = "one")]
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Residual blocks (CNN) and transformer blocks per stage.
    pub blocks_per_stage: Vec<usize>,
    pub attention: Vec<AttentionConfig>,
    pub bcim_reduction: usize,
    /// Channels per group in the BCIM fusion convolutions; `C` gives a dense fusion.
    #[serde(default = "one")]
    pub bcim_group_width: usize,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}

impl Default for DrFormerConfig {
    fn default() -> Self {
        let channels = vec![48, 96, 192];
        let attention = channels
            .iter()
            .map(|&c| AttentionConfig::new(c / 16, AttentionVariant::Gsa { grid: [7, 7, 7] }))
            .collect();
        Self {
            in_channels: 1,
            stage_channels: channels,
            blocks_per_stage: vec![2, 2, 6],
            attention,
            bcim_reduction: 4,
            bcim_group_width: 1,
            mlp_ratio: 4,
            num_classes: None,
        }
    }
}

impl DrFormerConfig {
    /// A small configuration with one block per stage and the given widths.
    pub fn tiny(stage_channels: Vec<usize>, heads: usize, variant: AttentionVariant) -> Self {
        let n = stage_channels.len();
        Self {
            attention: vec![AttentionConfig::new(heads, variant); n],
            blocks_per_stage: vec![1; n],
            stage_channels,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn final_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.blocks_per_stage.len() != n || self.attention.len() != n {
            return Err(config_err!(
                "stage lists must be non-empty with equal lengths (channels {}, blocks {}, attention {})",
                n,
                self.blocks_per_stage.len(),
                self.attention.len()
            ));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) || self.stage_channels[0] == 0 {
            return Err(config_err!("stage channels {:?} must be positive and strictly increasing", self.stage_channels));
        }
        if self.bcim_reduction == 0 || self.stage_channels.iter().any(|&c| c / self.bcim_reduction == 0) {
            return Err(config_err!("BCIM reduction {} leaves an empty hidden layer", self.bcim_reduction));
        }
        if self.bcim_group_width == 0 || self.stage_channels.iter().any(|&c| c % self.bcim_group_width != 0) {
            return Err(config_err!("BCIM group width {} must divide every stage width", self.bcim_group_width));
        }
        if self.in_channels == 0 {
            return Err(config_err!("input channels must be >= 1"));
        }
        for (a, &c) in self.attention.iter().zip(&self.stage_channels) {
            a.validate(c)?;
        }
        if let Some(k) = self.num_classes {
            if k < 2 {
                return Err(config_err!("need at least 2 classes, got {k}"));
            }
        }
        Ok(())
    }

    /// H and W of the high-resolution input must be divisible by `2^(stages + 1)`.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let m = 1usize << (self.num_stages() + 1);
        if dims[0] == 0 || dims[1] % m != 0 || dims[2] % m != 0 || dims[1] == 0 || dims[2] == 0 {
            return Err(shape_err!(
                "input {dims:?} not supported: H and W must be positive multiples of {m} for {} stages",
                self.num_stages()
            ));
        }
        Ok(())
    }

    /// High-stream `(D, H, W)` at each stage for a high-resolution input.
    pub fn stage_dims(&self, input: [usize; 3]) -> Vec<[usize; 3]> {
        (0..self.num_stages())
            .map(|s| [input[0], input[1] >> (s + 1), input[2] >> (s + 1)])
            .collect()
    }
}

/// Paired high- and half-resolution feature maps with equal B, C and D.
#[derive(Clone, Debug)]
pub struct DualResFeatures<T: Element> {
    pub high: Var<T>,
    pub low: Var<T>,
}

impl<T: Element> DualResFeatures<T> {
    pub fn check(&self) -> Result<()> {
        let (h, l) = (self.high.shape(), self.low.shape());
        if h.len() != 5 || l.len() != 5 || h[..3] != l[..3] || h[3] != 2 * l[3] || h[4] != 2 * l[4] {
            return Err(shape_err!("dual-resolution pair {h:?} / {l:?} violates the 2x H, W ratio"));
        }
        Ok(())
    }
}

/// One module's analytic cost for a single sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub module: String,
    pub macs: u64,
    pub params: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    pub cnn: Vec<ResidualBlock>,
    pub transformer: Vec<TransformerBlock>,
    pub bcim: Option<Bcim>,
    /// Transition from the previous stage: strided conv (CNN) and patch merge (transformer).
    pub down: Option<(ConvBn, Conv3d, LayerNorm)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrFormerBackbone {
    pub cfg: DrFormerConfig,
    pub bcim_enabled: bool,
    pub stem_high: ConvBn,
    pub stem_low: (Conv3d, LayerNorm),
    pub stages: Vec<Stage>,
}

impl DrFormerBackbone {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &DrFormerConfig, bcim_enabled: bool) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let cin = cfg.in_channels;
        let stem_high = ConvBn::new(
            pb,
            &join(name, "stem_high"),
            |pb, n| Conv3d::k3(pb, n, cin, c0, [1, 2, 2], false),
            true,
        );
        let stem_low = (
            Conv3d::k3(pb, &join(name, "stem_low.conv"), cin, c0, [1, 2, 2], true),
            LayerNorm::new(pb, &join(name, "stem_low.norm"), c0),
        );
        let mut stages = Vec::new();
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let sn = join(name, &format!("stages.{i}"));
            let down = (i > 0).then(|| {
                let prev = cfg.stage_channels[i - 1];
                (
                    ConvBn::new(pb, &join(&sn, "down_high"), |pb, n| Conv3d::k3(pb, n, prev, c, [1, 2, 2], false), true),
                    Conv3d::new(pb, &join(&sn, "down_low.conv"), prev, c, [1, 2, 2], [1, 2, 2], [0; 3], 1, true),
                    LayerNorm::new(pb, &join(&sn, "down_low.norm"), c),
                )
            });
            let cnn = (0..cfg.blocks_per_stage[i])
                .map(|b| ResidualBlock::new(pb, &join(&sn, &format!("cnn.{b}")), c))
                .collect();
            let transformer = (0..cfg.blocks_per_stage[i])
                .map(|b| TransformerBlock::new(pb, &join(&sn, &format!("transformer.{b}")), c, &cfg.attention[i], cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            let bcim = bcim_enabled.then(|| Bcim::new(pb, &join(&sn, "bcim"), c, cfg.bcim_reduction, cfg.bcim_group_width));
            stages.push(Stage {
                cnn,
                transformer,
                bcim,
                down,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            bcim_enabled,
            stem_high,
            stem_low,
            stages,
        })
    }

    /// `high_in (B, Cin, D, H, W)`, `low_in (B, Cin, D, H/2, W/2)` to the final-stage pair.
    ///
    /// Stage outputs are tapped as `stage{s}.high` / `stage{s}.low`, 1-based.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, high_in: &Var<T>, low_in: &Var<T>) -> Result<DualResFeatures<T>> {
        let hs = high_in.shape();
        if hs.len() != 5 || hs[1] != self.cfg.in_channels {
            return Err(shape_err!("backbone input {hs:?}, expected (B, {}, D, H, W)", self.cfg.in_channels));
        }
        self.cfg.check_input([hs[2], hs[3], hs[4]])?;
        DualResFeatures {
            high: high_in.clone(),
            low: low_in.clone(),
        }
        .check()?;
        let mut high = self.stem_high.forward(s, high_in)?;
        let mut low = to_channels_last(&self.stem_low.0.forward(s, low_in)?)?;
        low = self.stem_low.1.forward(s, &low)?;
        for (i, st) in self.stages.iter().enumerate() {
            if let Some((dh, dl, norm)) = &st.down {
                high = dh.forward(s, &high)?;
                low = norm.forward(s, &to_channels_last(&dl.forward(s, &to_channels_first(&low)?)?)?)?;
            }
            for b in &st.cnn {
                high = b.forward(s, &high)?;
            }
            for b in &st.transformer {
                low = b.forward(s, &low)?;
            }
            let mut f = DualResFeatures {
                high,
                low: to_channels_first(&low)?,
            };
            if let Some(bcim) = &st.bcim {
                f = bcim.forward(s, &f)?;
            }
            s.tap(&format!("stage{}.high", i + 1), &f.high);
            s.tap(&format!("stage{}.low", i + 1), &f.low);
            high = f.high;
            low = to_channels_last(&f.low)?;
        }
        Ok(DualResFeatures {
            high,
            low: to_channels_first(&low)?,
        })
    }

    /// Analytic per-module costs for one high-resolution input of `dims`.
    pub fn costs(&self, name: &str, dims: [usize; 3]) -> Vec<ModuleCost> {
        let vox = |d: [usize; 3]| d.iter().product::<usize>();
        let half = |d: [usize; 3]| [d[0], d[1] / 2, d[2] / 2];
        let sd = self.cfg.stage_dims(dims);
        let mut out = vec![
            ModuleCost {
                module: join(name, "stem_high"),
                macs: self.stem_high.conv.macs(vox(sd[0])),
                params: self.stem_high.num_params(),
            },
            ModuleCost {
                module: join(name, "stem_low"),
                macs: self.stem_low.0.macs(vox(half(sd[0]))),
                params: self.stem_low.0.num_params() + self.stem_low.1.num_params(),
            },
        ];
        for (i, st) in self.stages.iter().enumerate() {
            let (hd, ld) = (sd[i], half(sd[i]));
            let sn = join(name, &format!("stages.{i}"));
            if let Some((dh, dl, norm)) = &st.down {
                out.push(ModuleCost {
                    module: join(&sn, "down"),
                    macs: dh.conv.macs(vox(hd)) + dl.macs(vox(ld)),
                    params: dh.num_params() + dl.num_params() + norm.num_params(),
                });
            }
            out.push(ModuleCost {
                module: join(&sn, "cnn"),
                macs: st.cnn.iter().map(|b| b.macs(vox(hd))).sum(),
                params: st.cnn.iter().map(ResidualBlock::num_params).sum(),
            });
            out.push(ModuleCost {
                module: join(&sn, "transformer"),
                macs: st.transformer.iter().map(|b| b.macs(ld)).sum(),
                params: st.transformer.iter().map(TransformerBlock::num_params).sum(),
            });
            if let Some(b) = &st.bcim {
                out.push(ModuleCost {
                    module: join(&sn, "bcim"),
                    macs: b.macs(vox(hd), vox(ld)),
                    params: b.num_params(),
                });
            }
        }
        out
    }
}

/// Pools the high stream to the low size, concatenates channels and applies GAP: `(B, 2C)`.
pub fn merge_streams<T: Element>(f: &DualResFeatures<T>) -> Result<Var<T>> {
    f.check()?;
    let ls = f.low.shape();
    let down = pool_hw(&f.high, ls[3], ls[4])?;
    global_avg_pool(&concat(&[down, f.low.clone()], 1)?)
}

/// GAP of the merged streams followed by a linear layer to `K` logits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, num_classes: usize) -> Self {
        Self {
            fc: Linear::new(pb, &join(name, "fc"), 2 * channels, num_classes, true, Init::TruncNormal { std: 0.02 }),
        }
    }

    pub fn forward<T: Element>(&self, s: &Session<'_, T>, f: &DualResFeatures<T>) -> Result<Var<T>> {
        self.fc.forward(s, &merge_streams(f)?)
    }

    pub fn num_params(&self) -> usize {
        self.fc.num_params()
    }

    pub fn cost(&self, name: &str) -> ModuleCost {
        ModuleCost {
            module: join(name, "fc"),
            macs: self.fc.macs(1),
            params: self.num_params(),
        }
    }
}

/// Builds the `(high, low)` input pair from a high-resolution batch `(B, C, D, H, W)`.
pub fn dual_inputs<T: Element>(x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let s = x.shape();
    if s.len() != 5 || s[3] % 2 != 0 || s[4] % 2 != 0 {
        return Err(shape_err!("input {s:?} needs even H and W"));
    }
    let low = pool_hw(x, s[3] / 2, s[4] / 2)?;
    Ok((x.clone(), low))
}

/// Standalone single-volume classifier with the same parameter names as the
/// multi-phase model (`backbone.*`, `head.*`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrFormerClassifier {
    pub backbone: DrFormerBackbone,
    pub head: ClassifierHead,
}

impl DrFormerClassifier {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: &DrFormerConfig) -> Result<Self> {
        let k = cfg.num_classes.ok_or_else(|| config_err!("classification needs num_classes"))?;
        let backbone = DrFormerBackbone::new(pb, "backbone", cfg, true)?;
        let head = ClassifierHead::new(pb, "head", cfg.final_channels(), k);
        Ok(Self { backbone, head })
    }

    /// `x (B, Cin, D, H, W)` to logits `(B, K)`.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (high, low) = dual_inputs(x)?;
        let f = self.backbone.forward(s, &high, &low)?;
        self.head.forward(s, &f)
    }
}
