use ndarray::{ArrayD, IxDyn};

use super::{cast, Element, Var};
use crate::error::{shape_err, Result};

/// Where batch normalization takes its statistics from.
pub enum BatchNormStats<'a, T> {
    /// Normalize with the current batch's statistics (training).
    Batch,
    /// Normalize with stored running statistics (inference).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel normalization of `x (B, C, ..)` followed by an affine map.
///
/// In batch mode, also returns this batch's mean and unbiased variance per
/// channel so the caller can update running statistics.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Element>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    stats: BatchNormStats<'_, T>,
    eps: f64,
) -> Result<(Var<T>, Option<(Vec<T>, Vec<T>)>)> {
    let s = x.shape();
    if s.len() < 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(shape_err!(
            "batch norm input {s:?} with affine {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let (b, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let n = b * sp;
    let xv = x.value().as_slice().expect("standard layout");
    let eps_t: T = cast(eps);

    let (mean, var, batch_stats) = match stats {
        BatchNormStats::Batch => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, chunk) in xv.chunks(sp).enumerate() {
                mean[i % c] = mean[i % c] + chunk.iter().copied().sum::<T>();
            }
            let nt: T = cast(n as f64);
            mean.iter_mut().for_each(|m| *m = *m / nt);
            for (i, chunk) in xv.chunks(sp).enumerate() {
                let m = mean[i % c];
                var[i % c] = var[i % c] + chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            let unbiased: Vec<T> = var
                .iter()
                .map(|&v| if n > 1 { v / cast((n - 1) as f64) } else { v })
                .collect();
            var.iter_mut().for_each(|v| *v = *v / nt);
            (mean.clone(), var, Some((mean, unbiased)))
        }
        BatchNormStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(shape_err!("running stats of length {} for {c} channels", mean.len()));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let train = batch_stats.is_some();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let g = gamma.value().as_slice().unwrap();
    let bt = beta.value().as_slice().unwrap();

    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for (i, (chunk, (hc, oc))) in xv
        .chunks(sp)
        .zip(xhat.chunks_mut(sp).zip(out.chunks_mut(sp)))
        .enumerate()
    {
        let ch = i % c;
        for ((&v, h), o) in chunk.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
            *h = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *h + bt[ch];
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(s), out).unwrap();
    let var_out = Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |grad, p, _| {
            let gv = grad.as_standard_layout();
            let gv = gv.as_slice().unwrap();
            let gamma = p[1].value().as_slice().unwrap();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (i, (gc, hc)) in gv.chunks(sp).zip(xhat.chunks(sp)).enumerate() {
                let ch = i % c;
                for (&d, &h) in gc.iter().zip(hc) {
                    sum_dy[ch] = sum_dy[ch] + d;
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + d * h;
                }
            }
            let gx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); gv.len()];
                let nt: T = cast(n as f64);
                for (i, ((gc, hc), dc)) in gv
                    .chunks(sp)
                    .zip(xhat.chunks(sp))
                    .zip(dx.chunks_mut(sp))
                    .enumerate()
                {
                    let ch = i % c;
                    let k = gamma[ch] * inv_std[ch];
                    for ((&d, &h), o) in gc.iter().zip(hc).zip(dc.iter_mut()) {
                        *o = if train {
                            k * (d - sum_dy[ch] / nt - h * sum_dy_xhat[ch] / nt)
                        } else {
                            k * d
                        };
                    }
                }
                ArrayD::from_shape_vec(IxDyn(p[0].shape()), dx).unwrap()
            });
            vec![
                gx,
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), sum_dy_xhat).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), sum_dy).unwrap()),
            ]
        },
    );
    Ok((var_out, batch_stats))
}

/// Normalization over the last axis with a learned affine map.
pub fn layer_norm<T: Element>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
    let c = *x.shape().last().ok_or_else(|| shape_err!("layer norm of a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!("layer norm over {c} with affine {:?}", gamma.shape()));
    }
    let xv = x.value().as_slice().expect("standard layout");
    let g = gamma.value().as_slice().unwrap();
    let bt = beta.value().as_slice().unwrap();
    let eps_t: T = cast(eps);
    let ct: T = cast(c as f64);
    let rows = xv.len() / c.max(1);
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xv.len()];
    for (r, (row, (hr, or))) in xv
        .chunks(c)
        .zip(xhat.chunks_mut(c).zip(out.chunks_mut(c)))
        .enumerate()
    {
        let mean = row.iter().copied().sum::<T>() / ct;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ct;
        let is = T::one() / (var + eps_t).sqrt();
        inv_std[r] = is;
        for (j, (&v, (h, o))) in row.iter().zip(hr.iter_mut().zip(or.iter_mut())).enumerate() {
            *h = (v - mean) * is;
            *o = g[j] * *h + bt[j];
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(x.shape()), out).unwrap();
    Ok(Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |grad, p, _| {
            let gv = grad.as_standard_layout();
            let gv = gv.as_slice().unwrap();
            let gamma = p[1].value().as_slice().unwrap();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = p[0].requires_grad().then(|| vec![T::zero(); gv.len()]);
            for (r, (gr, hr)) in gv.chunks(c).zip(xhat.chunks(c)).enumerate() {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..c {
                    dgamma[j] = dgamma[j] + gr[j] * hr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    let dh = gr[j] * gamma[j];
                    s1 = s1 + dh;
                    s2 = s2 + dh * hr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let dr = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let dh = gr[j] * gamma[j];
                        dr[j] = inv_std[r] * (dh - s1 / ct - hr[j] * s2 / ct);
                    }
                }
            }
            vec![
                dx.map(|v| ArrayD::from_shape_vec(IxDyn(p[0].shape()), v).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        },
    ))
}
