//! 3D multi-head self-attention over channel-last token fields `(B, D, H, W, C)`.
//!
//! All variants share one projection set (`q`, `k`, `v`, `proj`) and one core
//! [`MultiHeadAttention::attend`] over grouped token sequences. Variants differ
//! only in how tokens are grouped (windows, grid cells) or how the key/value
//! set is built (strided reduction, pooling).

mod block;

pub use block::TransformerBlock;

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, concat, matmul, softmax_last, Element, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{join, pool_hw, to_channels_first, to_channels_last, Conv3d, Init, LayerNorm, Linear, ParamBuilder, ParamKind, Session};

/// Additive logit for excluded keys; large enough that `exp` underflows to exactly 0.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AttentionVariant {
    Dense,
    /// Non-overlapping windows with an optional cyclic shift.
    Swin { window: [usize; 3], shift: [usize; 3] },
    /// Keys and values from a strided `(1, r, r)` reduction; D is never reduced.
    Sra { reduction_ratio: usize },
    /// Keys and values from average pools at each ratio in H and W, concatenated.
    Psa { pool_ratios: Vec<usize> },
    /// Tokens sharing one offset inside `grid`-strided cells attend together.
    Gsa { grid: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub variant: AttentionVariant,
    /// Learned relative-position bias inside each group; swin and gsa only.
    #[serde(default)]
    pub relative_bias: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, variant: AttentionVariant) -> Self {
        Self {
            heads,
            variant,
            relative_bias: false,
        }
    }

    pub fn dense(heads: usize) -> Self {
        Self::new(heads, AttentionVariant::Dense)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(config_err!("{channels} channels are not divisible into {} heads", self.heads));
        }
        match &self.variant {
            AttentionVariant::Dense => {}
            AttentionVariant::Swin { window, shift } => {
                if window.contains(&0) {
                    return Err(config_err!("swin window {window:?} must be >= 1"));
                }
                if (0..3).any(|i| shift[i] >= window[i]) {
                    return Err(config_err!("swin shift {shift:?} must be smaller than window {window:?}"));
                }
            }
            AttentionVariant::Sra { reduction_ratio } => {
                if *reduction_ratio == 0 {
                    return Err(config_err!("reduction ratio must be >= 1"));
                }
            }
            AttentionVariant::Psa { pool_ratios } => {
                if pool_ratios.is_empty() || pool_ratios.contains(&0) {
                    return Err(config_err!("pool ratios {pool_ratios:?} must be non-empty and >= 1"));
                }
            }
            AttentionVariant::Gsa { grid } => {
                if grid.contains(&0) {
                    return Err(config_err!("gsa grid {grid:?} must be >= 1"));
                }
            }
        }
        if self.relative_bias && self.bias_extent().is_none() {
            return Err(config_err!("relative position bias needs a swin or gsa variant"));
        }
        Ok(())
    }

    /// Maximum group extent of the block-grouped variants.
    fn bias_extent(&self) -> Option<[usize; 3]> {
        match &self.variant {
            AttentionVariant::Swin { window, .. } => Some(*window),
            AttentionVariant::Gsa { grid } => Some(*grid),
            _ => None,
        }
    }
}

/// Token grouping of a padded field: `outer` blocks of `inner` tokens per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Grouping {
    outer: [usize; 3],
    inner: [usize; 3],
    /// Group by the outer index (windows) or by the inner index (grid cells).
    by_outer: bool,
}

impl Grouping {
    fn padded(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.outer[i] * self.inner[i])
    }

    fn group_shape(&self) -> [usize; 3] {
        if self.by_outer {
            self.inner
        } else {
            self.outer
        }
    }

    fn count_shape(&self) -> [usize; 3] {
        if self.by_outer {
            self.outer
        } else {
            self.inner
        }
    }

    fn num_groups(&self) -> usize {
        self.count_shape().iter().product()
    }

    fn group_len(&self) -> usize {
        self.group_shape().iter().product()
    }

    /// Padded-field coordinates of token `t` in group `g`.
    fn coords(&self, g: usize, t: usize) -> [usize; 3] {
        let gc = unravel(g, self.count_shape());
        let tc = unravel(t, self.group_shape());
        [0, 1, 2].map(|i| {
            if self.by_outer {
                gc[i] * self.inner[i] + tc[i]
            } else {
                tc[i] * self.inner[i] + gc[i]
            }
        })
    }

    /// `(B, D, H, W, C)` to `(B * groups, group_len, C)`.
    fn split<T: Element>(&self, x: &Var<T>) -> Result<Var<T>> {
        let (b, c) = (x.shape()[0], x.shape()[4]);
        let [o, i] = [self.outer, self.inner];
        let y = x.reshape(&[b, o[0], i[0], o[1], i[1], o[2], i[2], c])?;
        let perm = if self.by_outer { [0, 1, 3, 5, 2, 4, 6, 7] } else { [0, 2, 4, 6, 1, 3, 5, 7] };
        y.permute(&perm)?.reshape(&[b * self.num_groups(), self.group_len(), c])
    }

    fn merge<T: Element>(&self, y: &Var<T>, batch: usize) -> Result<Var<T>> {
        let c = y.shape()[2];
        let [o, i] = [self.outer, self.inner];
        let (first, second) = if self.by_outer { (o, i) } else { (i, o) };
        let y = y.reshape(&[batch, first[0], first[1], first[2], second[0], second[1], second[2], c])?;
        let perm = if self.by_outer { [0, 1, 4, 2, 5, 3, 6, 7] } else { [0, 4, 1, 5, 2, 6, 3, 7] };
        let p = self.padded();
        y.permute(&perm)?.reshape(&[batch, p[0], p[1], p[2], c])
    }
}

fn unravel(mut idx: usize, shape: [usize; 3]) -> [usize; 3] {
    let w = idx % shape[2];
    idx /= shape[2];
    [idx / shape[1], idx % shape[1], w]
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Multi-head self-attention with per-variant token grouping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub channels: usize,
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv3d, LayerNorm)>,
    pub bias_table: Option<String>,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate(channels)?;
        let lin = |pb: &mut ParamBuilder<'_, T>, n: &str| {
            Linear::new(pb, &join(name, n), channels, channels, true, Init::TruncNormal { std: 0.02 })
        };
        let (q, k, v, proj) = (lin(pb, "q"), lin(pb, "k"), lin(pb, "v"), lin(pb, "proj"));
        let sr = match cfg.variant {
            AttentionVariant::Sra { reduction_ratio: r } if r > 1 => Some((
                Conv3d::new(pb, &join(name, "sr"), channels, channels, [1, r, r], [1, r, r], [0; 3], 1, true),
                LayerNorm::new(pb, &join(name, "sr_norm"), channels),
            )),
            _ => None,
        };
        let bias_table = match cfg.bias_extent() {
            Some(e) if cfg.relative_bias => {
                let t: usize = e.iter().map(|&x| 2 * x - 1).product();
                Some(pb.add(&join(name, "relative_bias"), &[t, cfg.heads], Init::TruncNormal { std: 0.02 }, ParamKind::NoDecay))
            }
            _ => None,
        };
        Ok(Self {
            channels,
            cfg: cfg.clone(),
            q,
            k,
            v,
            proj,
            sr,
            bias_table,
        })
    }

    fn head_dim(&self) -> usize {
        self.channels / self.cfg.heads
    }

    /// Scaled dot-product attention over grouped sequences.
    ///
    /// `q_src (G, Lq, C)`, `kv_src (G, Lk, C)`. `mask (Gm, 1, Lq, Lk)` is added to
    /// the logits of group `b * Gm + m`; `bias (heads, Lq, Lk)` to every group.
    pub fn attend<T: Element>(
        &self,
        s: &Session<'_, T>,
        q_src: &Var<T>,
        kv_src: &Var<T>,
        mask: Option<&ArrayD<T>>,
        bias: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let (g, lq, c) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
        let lk = kv_src.shape()[1];
        if c != self.channels || kv_src.shape()[0] != g || kv_src.shape()[2] != c {
            return Err(shape_err!("attention over {:?} / {:?} with {} channels", q_src.shape(), kv_src.shape(), self.channels));
        }
        let (h, dh) = (self.cfg.heads, self.head_dim());
        let q = self.q.forward(s, q_src)?.reshape(&[g, lq, h, dh])?.permute(&[0, 2, 1, 3])?;
        let k = self.k.forward(s, kv_src)?.reshape(&[g, lk, h, dh])?.permute(&[0, 2, 3, 1])?;
        let v = self.v.forward(s, kv_src)?.reshape(&[g, lk, h, dh])?.permute(&[0, 2, 1, 3])?;
        let mut logits = matmul(&q, &k)?.scale(cast::<T>(1.0 / (dh as f64).sqrt()));
        if let Some(b) = bias {
            logits = logits.add(b)?;
        }
        if let Some(m) = mask {
            let gm = m.shape()[0];
            let masked = logits.reshape(&[g / gm, gm, h, lq, lk])?.add(&Var::constant(m.clone()))?;
            logits = masked.reshape(&[g, h, lq, lk])?;
        }
        let probs = softmax_last(&logits);
        if s.wants_attention() {
            s.record_attention(probs.value());
        }
        let out = matmul(&probs, &v)?.permute(&[0, 2, 1, 3])?.reshape(&[g, lq, c])?;
        self.proj.forward(s, &out)
    }

    /// `x (B, D, H, W, C)` to the same shape.
    pub fn forward<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.ndim() != 5 || x.shape()[4] != self.channels {
            return Err(shape_err!("attention input {:?}, expected (B, D, H, W, {})", x.shape(), self.channels));
        }
        let sh = x.shape().to_vec();
        let (b, dims, c) = (sh[0], [sh[1], sh[2], sh[3]], sh[4]);
        let l = dims.iter().product::<usize>();
        match &self.cfg.variant {
            AttentionVariant::Dense => {
                let t = x.reshape(&[b, l, c])?;
                self.attend(s, &t, &t, None, None)?.reshape(&sh)
            }
            AttentionVariant::Swin { window, shift } => self.forward_swin(s, x, dims, *window, *shift),
            AttentionVariant::Gsa { grid } => self.forward_gsa(s, x, dims, *grid),
            AttentionVariant::Sra { .. } => {
                let t = x.reshape(&[b, l, c])?;
                let kv = self.reduced_tokens(s, x)?;
                self.attend(s, &t, &kv, None, None)?.reshape(&sh)
            }
            AttentionVariant::Psa { pool_ratios } => {
                let t = x.reshape(&[b, l, c])?;
                let xc = to_channels_first(x)?;
                let parts = pool_ratios
                    .iter()
                    .map(|&r| {
                        let p = pool_hw(&xc, ceil_div(dims[1], r), ceil_div(dims[2], r))?;
                        let n = p.shape()[2] * p.shape()[3] * p.shape()[4];
                        to_channels_last(&p)?.reshape(&[b, n, c])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let kv = concat(&parts, 1)?;
                self.attend(s, &t, &kv, None, None)?.reshape(&sh)
            }
        }
    }

    /// SRA keys/values: zero-pad H, W to multiples of r, strided conv, layer norm.
    fn reduced_tokens<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (b, c) = (x.shape()[0], x.shape()[4]);
        let Some((conv, norm)) = &self.sr else {
            return x.reshape(&[b, x.shape()[1..4].iter().product(), c]);
        };
        let r = conv.kernel[1];
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let xp = x.pad(&[(0, 0), (0, 0), (0, ceil_div(h, r) * r - h), (0, ceil_div(w, r) * r - w), (0, 0)])?;
        let y = conv.forward(s, &to_channels_first(&xp)?)?;
        let y = norm.forward(s, &to_channels_last(&y)?)?;
        let n = y.shape()[1..4].iter().product();
        y.reshape(&[b, n, c])
    }

    fn forward_grouped<T: Element>(
        &self,
        s: &Session<'_, T>,
        x: &Var<T>,
        dims: [usize; 3],
        grouping: Grouping,
        shift: [usize; 3],
    ) -> Result<Var<T>> {
        let b = x.shape()[0];
        let p = grouping.padded();
        let pads: Vec<(usize, usize)> = [(0, 0), (0, p[0] - dims[0]), (0, p[1] - dims[1]), (0, p[2] - dims[2]), (0, 0)].to_vec();
        let xp = x.pad(&pads)?;
        let neg: [isize; 5] = [0, -(shift[0] as isize), -(shift[1] as isize), -(shift[2] as isize), 0];
        let xr = xp.roll(&neg)?;
        let tokens = grouping.split(&xr)?;
        let mask = build_mask::<T>(grouping, dims, shift);
        let bias = self.relative_bias(s, grouping)?;
        let out = self.attend(s, &tokens, &tokens, mask.as_ref(), bias.as_ref())?;
        let merged = grouping.merge(&out, b)?;
        let back: Vec<isize> = neg.iter().map(|v| -v).collect();
        let un = merged.roll(&back)?;
        let mut y = un;
        for (axis, &len) in dims.iter().enumerate() {
            if len != p[axis] {
                y = y.narrow(axis + 1, 0, len)?;
            }
        }
        Ok(y)
    }

    fn forward_swin<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>, dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Result<Var<T>> {
        // A window covering the whole axis makes the shift meaningless there.
        let w = [0, 1, 2].map(|i| window[i].min(dims[i]));
        let sh = [0, 1, 2].map(|i| if window[i] >= dims[i] { 0 } else { shift[i] });
        let grouping = Grouping {
            outer: [0, 1, 2].map(|i| ceil_div(dims[i], w[i])),
            inner: w,
            by_outer: true,
        };
        self.forward_grouped(s, x, dims, grouping, sh)
    }

    fn forward_gsa<T: Element>(&self, s: &Session<'_, T>, x: &Var<T>, dims: [usize; 3], grid: [usize; 3]) -> Result<Var<T>> {
        let g = [0, 1, 2].map(|i| grid[i].min(dims[i]));
        let grouping = Grouping {
            outer: g,
            inner: [0, 1, 2].map(|i| ceil_div(dims[i], g[i])),
            by_outer: false,
        };
        self.forward_grouped(s, x, dims, grouping, [0; 3])
    }

    fn relative_bias<T: Element>(&self, s: &Session<'_, T>, grouping: Grouping) -> Result<Option<Var<T>>> {
        let (Some(table), Some(ext)) = (&self.bias_table, self.cfg.bias_extent()) else {
            return Ok(None);
        };
        let gs = grouping.group_shape();
        let l = grouping.group_len();
        let span = ext.map(|e| 2 * e - 1);
        let mut idx = Vec::with_capacity(l * l);
        for qi in 0..l {
            let a = unravel(qi, gs);
            for ki in 0..l {
                let b = unravel(ki, gs);
                let r = [0, 1, 2].map(|i| a[i] + ext[i] - 1 - b[i]);
                idx.push((r[0] * span[1] + r[1]) * span[2] + r[2]);
            }
        }
        let h = self.cfg.heads;
        let bias = s.param(table)?.index_select(&idx)?.permute(&[1, 0])?.reshape(&[h, l, l])?;
        Ok(Some(bias))
    }

    pub fn num_params(&self) -> usize {
        let base = self.q.num_params() + self.k.num_params() + self.v.num_params() + self.proj.num_params();
        let sr = self.sr.as_ref().map_or(0, |(c, n)| c.num_params() + n.num_params());
        let bias = self
            .cfg
            .bias_extent()
            .filter(|_| self.bias_table.is_some())
            .map_or(0, |e| e.iter().map(|&x| 2 * x - 1).product::<usize>() * self.cfg.heads);
        base + sr + bias
    }

    /// Multiply-accumulates for one sample over a field of `dims` tokens:
    /// projections plus the `QK^T` and `AV` products.
    pub fn macs(&self, dims: [usize; 3]) -> u64 {
        let c = self.channels as u64;
        let l = dims.iter().product::<usize>() as u64;
        match &self.cfg.variant {
            AttentionVariant::Dense => 4 * l * c * c + 2 * l * l * c,
            AttentionVariant::Swin { window, .. } => {
                let w = [0, 1, 2].map(|i| window[i].min(dims[i]));
                let p: u64 = (0..3).map(|i| (ceil_div(dims[i], w[i]) * w[i]) as u64).product();
                let wl = w.iter().product::<usize>() as u64;
                4 * p * c * c + 2 * p * wl * c
            }
            AttentionVariant::Gsa { grid } => {
                let g = [0, 1, 2].map(|i| grid[i].min(dims[i]));
                let p: u64 = (0..3).map(|i| (ceil_div(dims[i], g[i]) * g[i]) as u64).product();
                let gl = g.iter().product::<usize>() as u64;
                4 * p * c * c + 2 * p * gl * c
            }
            AttentionVariant::Sra { reduction_ratio: r } => {
                let lk = (dims[0] * ceil_div(dims[1], *r) * ceil_div(dims[2], *r)) as u64;
                let conv = if *r > 1 { (r * r) as u64 * c * c * lk } else { 0 };
                2 * l * c * c + 2 * lk * c * c + conv + 2 * l * lk * c
            }
            AttentionVariant::Psa { pool_ratios } => {
                let lk: u64 = pool_ratios
                    .iter()
                    .map(|&r| (dims[0] * ceil_div(dims[1], r) * ceil_div(dims[2], r)) as u64)
                    .sum();
                2 * l * c * c + 2 * lk * c * c + 2 * l * lk * c
            }
        }
    }
}

/// Additive mask `(groups, 1, L, L)` excluding pad keys and, under a shift,
/// keys from a different pre-shift region. `None` when nothing is excluded.
fn build_mask<T: Element>(grouping: Grouping, dims: [usize; 3], shift: [usize; 3]) -> Option<ArrayD<T>> {
    let p = grouping.padded();
    if p == dims && shift == [0; 3] {
        return None;
    }
    let (ng, l) = (grouping.num_groups(), grouping.group_len());
    let neg: T = cast(MASKED_LOGIT);
    let mut m = Array4::<T>::zeros((ng, 1, l, l));
    for g in 0..ng {
        let info: Vec<([bool; 3], bool)> = (0..l)
            .map(|t| {
                let r = grouping.coords(g, t);
                let region = [0, 1, 2].map(|i| shift[i] > 0 && r[i] >= p[i] - shift[i]);
                let pad = (0..3).any(|i| (r[i] + shift[i]) % p[i] >= dims[i]);
                (region, pad)
            })
            .collect();
        for qi in 0..l {
            for ki in 0..l {
                if info[ki].1 || info[qi].0 != info[ki].0 {
                    m[[g, 0, qi, ki]] = neg;
                }
            }
        }
    }
    Some(m.into_dyn())
}

/// Convenience wrapper over a channel-first field `(B, C, D, H, W)`.
pub fn attention_channels_first<T: Element>(attn: &MultiHeadAttention, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
    to_channels_first(&attn.forward(s, &to_channels_last(x)?)?)
}

#[cfg(test)]
mod tests;
