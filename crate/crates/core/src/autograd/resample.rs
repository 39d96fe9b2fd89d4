//! Separable resampling along one axis: adaptive average pooling and linear
//! interpolation. Both are sparse linear maps, so the backward pass is the
//! transposed map.

use ndarray::{ArrayD, IxDyn};

use super::{cast, Element, Var};
use crate::error::{shape_err, Result};

/// A sparse linear map from `in_len` samples to `out_len` samples.
#[derive(Clone, Debug)]
pub struct AxisMap<T> {
    pub in_len: usize,
    pub out_len: usize,
    pub taps: Vec<Vec<(usize, T)>>,
}

impl<T: Element> AxisMap<T> {
    pub fn identity(len: usize) -> Self {
        Self {
            in_len: len,
            out_len: len,
            taps: (0..len).map(|i| vec![(i, T::one())]).collect(),
        }
    }

    /// Adaptive average pooling bins: output `i` averages
    /// `[floor(i * in / out), ceil((i + 1) * in / out))`.
    pub fn adaptive_avg(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|i| {
                let start = i * in_len / out_len;
                let end = ((i + 1) * in_len).div_ceil(out_len);
                let w: T = cast(1.0 / (end - start) as f64);
                (start..end).map(|j| (j, w)).collect()
            })
            .collect();
        Self { in_len, out_len, taps }
    }

    /// Linear interpolation with half-pixel centers (`align_corners = false`).
    pub fn linear(in_len: usize, out_len: usize) -> Self {
        if in_len == out_len {
            return Self::identity(in_len);
        }
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                if i1 == i0 || frac == 0.0 {
                    vec![(i0, T::one())]
                } else {
                    vec![(i0, cast(1.0 - frac)), (i1, cast(frac))]
                }
            })
            .collect();
        Self { in_len, out_len, taps }
    }

    fn split(shape: &[usize], axis: usize) -> (usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, inner)
    }

    /// Applies the map along `axis` of a standard-layout array.
    pub fn apply(&self, x: &ArrayD<T>, axis: usize) -> ArrayD<T> {
        let (outer, inner) = Self::split(x.shape(), axis);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![T::zero(); outer * self.out_len * inner];
        for o in 0..outer {
            for (i, taps) in self.taps.iter().enumerate() {
                let dst = &mut out[(o * self.out_len + i) * inner..(o * self.out_len + i + 1) * inner];
                for &(j, w) in taps {
                    let src = &xs[(o * self.in_len + j) * inner..(o * self.in_len + j + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + w * s;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = self.out_len;
        ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
    }

    /// Applies the transposed map along `axis` (gradient of [`AxisMap::apply`]).
    pub fn apply_transpose(&self, g: &ArrayD<T>, axis: usize) -> ArrayD<T> {
        let (outer, inner) = Self::split(g.shape(), axis);
        let g = g.as_standard_layout();
        let gs = g.as_slice().unwrap();
        let mut out = vec![T::zero(); outer * self.in_len * inner];
        for o in 0..outer {
            for (i, taps) in self.taps.iter().enumerate() {
                let src = &gs[(o * self.out_len + i) * inner..(o * self.out_len + i + 1) * inner];
                for &(j, w) in taps {
                    let dst = &mut out[(o * self.in_len + j) * inner..(o * self.in_len + j + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + w * s;
                    }
                }
            }
        }
        let mut shape = g.shape().to_vec();
        shape[axis] = self.in_len;
        ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
    }
}

fn map_axis<T: Element>(x: &Var<T>, axis: usize, map: AxisMap<T>) -> Result<Var<T>> {
    if axis >= x.ndim() || x.shape()[axis] != map.in_len {
        return Err(shape_err!("resample axis {axis} of {:?} from {}", x.shape(), map.in_len));
    }
    if map.in_len == map.out_len && map.taps.iter().enumerate().all(|(i, t)| t.len() == 1 && t[0] == (i, T::one())) {
        return Ok(x.clone());
    }
    let value = map.apply(x.value(), axis);
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, _| {
        vec![Some(map.apply_transpose(g, axis))]
    }))
}

/// Adaptive average pooling of `axis` down (or up) to `out_len` bins.
pub fn adaptive_avg_pool_axis<T: Element>(x: &Var<T>, axis: usize, out_len: usize) -> Result<Var<T>> {
    if out_len == 0 {
        return Err(shape_err!("pooling to zero length"));
    }
    let in_len = x.shape().get(axis).copied().unwrap_or(0);
    map_axis(x, axis, AxisMap::adaptive_avg(in_len, out_len))
}

/// Linear interpolation of `axis` to `out_len` samples.
pub fn linear_resize_axis<T: Element>(x: &Var<T>, axis: usize, out_len: usize) -> Result<Var<T>> {
    if out_len == 0 {
        return Err(shape_err!("resizing to zero length"));
    }
    let in_len = x.shape().get(axis).copied().unwrap_or(0);
    map_axis(x, axis, AxisMap::linear(in_len, out_len))
}
