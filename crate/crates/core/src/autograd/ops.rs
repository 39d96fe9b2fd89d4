//! Elementwise, structural and reduction operations.

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{cast, reduce_to_shape, Element, Var};
use crate::error::{shape_err, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn binary<T: Element>(
    a: &Var<T>,
    b: &Var<T>,
    f: impl Fn(T, T) -> T,
) -> Result<ArrayD<T>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.value().broadcast(IxDyn(&shape)).expect("checked");
    let bv = b.value().broadcast(IxDyn(&shape)).expect("checked");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

impl<T: Element> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = binary(self, other, |x, y| x + y)?;
        Ok(Var::from_op(value, vec![self.clone(), other.clone()], |g, p, _| {
            vec![
                Some(reduce_to_shape(g, p[0].shape())),
                Some(reduce_to_shape(g, p[1].shape())),
            ]
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = binary(self, other, |x, y| x - y)?;
        Ok(Var::from_op(value, vec![self.clone(), other.clone()], |g, p, _| {
            vec![
                Some(reduce_to_shape(g, p[0].shape())),
                Some(reduce_to_shape(&g.mapv(|x| -x), p[1].shape())),
            ]
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = binary(self, other, |x, y| x * y)?;
        Ok(Var::from_op(value, vec![self.clone(), other.clone()], |g, p, _| {
            let ga = p[0]
                .requires_grad()
                .then(|| reduce_to_shape(&(g * p[1].value()), p[0].shape()));
            let gb = p[1]
                .requires_grad()
                .then(|| reduce_to_shape(&(g * p[0].value()), p[1].shape()));
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, factor: T) -> Var<T> {
        let value = self.value().mapv(|x| x * factor);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.mapv(|x| x * factor))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        let value = self.value().mapv(|x| if x > T::zero() { x } else { T::zero() });
        Var::from_op(value, vec![self.clone()], |g, _, out| {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| {
                if y <= T::zero() {
                    *d = T::zero();
                }
            });
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().mapv(|x| T::one() / (T::one() + (-x).exp()));
        Var::from_op(value, vec![self.clone()], |g, _, out| {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| *d = *d * y * (T::one() - y));
            vec![Some(d)]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let k: T = cast((2.0 / std::f64::consts::PI).sqrt());
        let c: T = cast(0.044715);
        let half: T = cast(0.5);
        let three: T = cast(3.0);
        let value = self.value().mapv(|x| {
            half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
        });
        Var::from_op(value, vec![self.clone()], move |g, p, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(p[0].value()).for_each(|d, &x| {
                let u = k * (x + c * x * x * x);
                let t = u.tanh();
                let du = k * (T::one() + three * c * x * x);
                let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                *d = *d * deriv;
            });
            vec![Some(d)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let n: usize = shape.iter().product();
        if n != self.value().len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        let src = self.value().as_standard_layout();
        let value = ArrayD::from_shape_vec(IxDyn(shape), src.iter().copied().collect())
            .expect("length checked");
        Ok(Var::from_op(value, vec![self.clone()], |g, p, _| {
            let flat: Vec<T> = g.iter().copied().collect();
            vec![Some(ArrayD::from_shape_vec(IxDyn(p[0].shape()), flat).unwrap())]
        }))
    }

    /// Reorders axes; output is materialized in standard layout.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        if axes.len() != self.ndim() {
            return Err(shape_err!("permutation {axes:?} for rank {}", self.ndim()));
        }
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        }))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(shape_err!(
                "narrow axis {axis} [{start}, {}) of {:?}",
                start + len,
                self.shape()
            ));
        }
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        Ok(Var::from_op(value, vec![self.clone()], move |g, p, _| {
            let mut full = ArrayD::zeros(IxDyn(p[0].shape()));
            full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(full)]
        }))
    }

    /// Zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Var<T>> {
        if pads.len() != self.ndim() {
            return Err(shape_err!("pad spec rank {} vs {}", pads.len(), self.ndim()));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(a, b))| d + a + b)
            .collect();
        let pads = pads.to_vec();
        let mut value = ArrayD::zeros(IxDyn(&shape));
        interior(&mut value, &pads, self.shape()).assign(self.value());
        Ok(Var::from_op(value, vec![self.clone()], move |g, p, _| {
            let mut g = g.clone();
            vec![Some(interior(&mut g, &pads, p[0].shape()).to_owned())]
        }))
    }

    /// Cyclic shift: element at index `i` moves to `(i + shift) mod n`.
    pub fn roll(&self, shifts: &[isize]) -> Result<Var<T>> {
        if shifts.len() != self.ndim() {
            return Err(shape_err!("roll spec rank {} vs {}", shifts.len(), self.ndim()));
        }
        if shifts.iter().all(|&s| s == 0) {
            return Ok(self.clone());
        }
        let value = roll_array(self.value(), shifts);
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(roll_array(g, &back))]
        }))
    }

    /// Sum over `axes`, keeping them as length-1 dimensions.
    pub fn sum_keep(&self, axes: &[usize]) -> Var<T> {
        let mut value = self.value().clone();
        for &a in axes {
            value = value.sum_axis(Axis(a)).insert_axis(Axis(a));
        }
        Var::from_op(value, vec![self.clone()], |g, p, _| {
            vec![Some(
                g.broadcast(IxDyn(p[0].shape()))
                    .expect("keepdim broadcast")
                    .to_owned(),
            )]
        })
    }

    pub fn mean_keep(&self, axes: &[usize]) -> Var<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keep(axes).scale(T::one() / cast(n as f64))
    }

    /// Sum of all elements as a 0-dimensional value.
    pub fn sum_all(&self) -> Var<T> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Var::from_op(value, vec![self.clone()], |g, p, _| {
            let s = g.iter().next().copied().unwrap_or_else(T::zero);
            vec![Some(ArrayD::from_elem(IxDyn(p[0].shape()), s))]
        })
    }

    /// Selects entries along axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<T>> {
        let n = self.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err!("index {bad} out of range for axis of length {n}"));
        }
        let value = self.value().select(Axis(0), indices);
        let indices = indices.to_vec();
        Ok(Var::from_op(value, vec![self.clone()], move |g, p, _| {
            let mut out = ArrayD::zeros(IxDyn(p[0].shape()));
            for (row, &i) in indices.iter().enumerate() {
                let mut dst = out.index_axis_mut(Axis(0), i);
                dst += &g.index_axis(Axis(0), row);
            }
            vec![Some(out)]
        }))
    }
}

fn interior<'a, T: Element>(
    arr: &'a mut ArrayD<T>,
    pads: &[(usize, usize)],
    inner: &[usize],
) -> ndarray::ArrayViewMutD<'a, T> {
    let mut view = arr.view_mut();
    for (axis, (&(before, _), &len)) in pads.iter().zip(inner).enumerate() {
        view.slice_axis_inplace(Axis(axis), Slice::from(before..before + len));
    }
    view
}

fn roll_array<T: Element>(x: &ArrayD<T>, shifts: &[isize]) -> ArrayD<T> {
    let mut cur = x.clone();
    for (axis, &s) in shifts.iter().enumerate() {
        let n = cur.shape()[axis] as isize;
        if n == 0 {
            continue;
        }
        let s = s.rem_euclid(n) as usize;
        if s == 0 {
            continue;
        }
        let n = n as usize;
        let mut out = ArrayD::zeros(cur.raw_dim());
        out.slice_axis_mut(Axis(axis), Slice::from(s..n))
            .assign(&cur.slice_axis(Axis(axis), Slice::from(0..n - s)));
        out.slice_axis_mut(Axis(axis), Slice::from(0..s))
            .assign(&cur.slice_axis(Axis(axis), Slice::from(n - s..n)));
        cur = out;
    }
    cur
}

/// Concatenates along `axis`.
pub fn concat<T: Element>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    for p in parts {
        if p.ndim() != first.ndim()
            || p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err!(
                "concat along {axis}: {:?} vs {:?}",
                p.shape(),
                first.shape()
            ));
        }
    }
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::concatenate(Axis(axis), &views)
        .expect("validated")
        .as_standard_layout()
        .into_owned();
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Var::from_op(value, parts.to_vec(), move |g, p, _| {
        let mut start = 0;
        lens.iter()
            .zip(p)
            .map(|(&len, parent)| {
                let piece = parent.requires_grad().then(|| {
                    g.slice_axis(Axis(axis), Slice::from(start..start + len))
                        .as_standard_layout()
                        .into_owned()
                });
                start += len;
                piece
            })
            .collect()
    }))
}

/// Softmax over the last axis.
pub fn softmax_last<T: Element>(x: &Var<T>) -> Var<T> {
    let value = softmax_rows(x.value());
    Var::from_op(value, vec![x.clone()], |g, _, y| {
        let last = y.ndim() - 1;
        let dot = (g * y).sum_axis(Axis(last)).insert_axis(Axis(last));
        vec![Some(y * &(g - &dot))]
    })
}

pub(crate) fn softmax_rows<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut out = x.as_standard_layout().into_owned();
    let n = *x.shape().last().unwrap_or(&1);
    if n == 0 {
        return out;
    }
    for row in out.as_slice_mut().expect("standard layout").chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Mean cross-entropy of `(B, K)` logits against integer labels.
pub fn cross_entropy<T: Element>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!("logits {shape:?} vs {} labels", labels.len()));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(shape_err!("label {bad} out of range for {k} classes"));
    }
    let probs = softmax_rows(logits.value());
    let b = labels.len();
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[[i, l]].max(T::min_positive_value()).ln())
        .fold(T::zero(), |a, v| a + v)
        / cast(b as f64);
    let labels = labels.to_vec();
    Ok(Var::from_op(
        ArrayD::from_elem(IxDyn(&[]), loss),
        vec![logits.clone()],
        move |g, _, _| {
            let scale = g.iter().next().copied().unwrap_or_else(T::one) / cast(b as f64);
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[[i, l]] = d[[i, l]] - T::one();
            }
            vec![Some(d.mapv(|v| v * scale))]
        },
    ))
}
