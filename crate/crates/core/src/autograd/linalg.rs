use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};

use super::{Element, Var};
use crate::error::{shape_err, Result};

fn as_matrix<T: Element>(x: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), x.as_slice().expect("standard layout"))
        .expect("matrix view")
}

/// Batched matrix product `(.., m, k) x (.., k, n) -> (.., m, n)`.
///
/// Leading (batch) dimensions must match exactly.
pub fn matmul<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err!("matmul {sa:?} x {sb:?}"));
    }
    let r = sa.len();
    let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
    if sb[r - 2] != k {
        return Err(shape_err!("matmul inner dims {sa:?} x {sb:?}"));
    }
    let batch: usize = sa[..r - 2].iter().product();
    let mut out_shape = sa[..r - 2].to_vec();
    out_shape.extend([m, n]);
    let value = batched(a.value(), b.value(), batch, (m, k, n), false, false);
    let value = ArrayD::from_shape_vec(IxDyn(&out_shape), value).unwrap();
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], move |g, p, _| {
        let g = g.as_standard_layout();
        let ga = p[0].requires_grad().then(|| {
            let v = batched(&g.to_owned(), p[1].value(), batch, (m, n, k), false, true);
            ArrayD::from_shape_vec(IxDyn(p[0].shape()), v).unwrap()
        });
        let gb = p[1].requires_grad().then(|| {
            let v = batched(p[0].value(), &g.to_owned(), batch, (k, m, n), true, false);
            ArrayD::from_shape_vec(IxDyn(p[1].shape()), v).unwrap()
        });
        vec![ga, gb]
    }))
}

/// Computes `op(a_g) * op(b_g)` for every batch entry, where `dims = (m, k, n)`
/// describes the product after the optional transposes.
fn batched<T: Element>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    batch: usize,
    (m, k, n): (usize, usize, usize),
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().unwrap();
    let b = b.as_slice().unwrap();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let av = &a[i * m * k..(i + 1) * m * k];
        let bv = &b[i * k * n..(i + 1) * k * n];
        let am = if trans_a {
            ArrayView2::from_shape((k, m), av).unwrap().reversed_axes()
        } else {
            ArrayView2::from_shape((m, k), av).unwrap()
        };
        let bm = if trans_b {
            ArrayView2::from_shape((n, k), bv).unwrap().reversed_axes()
        } else {
            ArrayView2::from_shape((k, n), bv).unwrap()
        };
        let mut cm =
            ArrayViewMut2::from_shape((m, n), &mut out[i * m * n..(i + 1) * m * n]).unwrap();
        general_mat_mul(T::one(), &am, &bm, T::zero(), &mut cm);
    }
    out
}

/// Affine map over the last axis: `x (.., in) -> x W^T + b`, with `W (out, in)`.
pub fn linear<T: Element>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.last() != Some(&ws[1]) {
        return Err(shape_err!("linear input {xs:?} with weight {ws:?}"));
    }
    let (out_f, in_f) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(shape_err!("linear bias {:?} for {out_f} outputs", b.shape()));
        }
    }
    let rows = x.value().len() / in_f.max(1);
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().unwrap() = out_f;

    let xm = as_matrix(x.value(), rows, in_f);
    let wm = weight.value().view().into_dimensionality::<Ix2>().unwrap();
    let mut y = xm.dot(&wm.t());
    if let Some(b) = bias {
        y += &b.value().view().into_dimensionality::<ndarray::Ix1>().unwrap();
    }
    // `dot` may return column-major output; the reshape needs row-major.
    let value = standard(y).into_shape_with_order(IxDyn(&out_shape)).unwrap();

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(value, parents, move |g, p, _| {
        let g = g.as_standard_layout().into_owned();
        let gm = as_matrix(&g, rows, out_f);
        let wm = p[1].value().view().into_dimensionality::<Ix2>().unwrap();
        let gx = p[0].requires_grad().then(|| {
            standard(gm.dot(&wm))
                .into_shape_with_order(IxDyn(p[0].shape()))
                .unwrap()
        });
        let gw = p[1].requires_grad().then(|| {
            let xm = as_matrix(p[0].value(), rows, in_f);
            gm.t().dot(&xm).into_dyn()
        });
        let mut grads = vec![gx, gw];
        if p.len() == 3 {
            grads.push(p[2].requires_grad().then(|| gm.sum_axis(Axis(0)).into_dyn()));
        }
        grads
    }))
}

fn standard<T: Element>(a: ndarray::Array2<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.into_dyn()
    } else {
        a.as_standard_layout().into_owned().into_dyn()
    }
}
