//! Grouped, strided, zero-padded 3D convolution via im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Element, Var};
use crate::error::{shape_err, Result};

/// Stride, padding and grouping of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            if padded < kernel[i] || self.stride[i] == 0 {
                return Err(shape_err!(
                    "conv kernel {kernel:?} does not fit input {input:?} with padding {:?}",
                    self.padding
                ));
            }
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
struct Plan {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Plan {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }
    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }
}

/// `x (B, Cin, D, H, W)` convolved with `w (Cout, Cin / groups, kd, kh, kw)`.
pub fn conv3d<T: Element>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    geom: ConvGeometry,
) -> Result<Var<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(shape_err!("conv3d expects 5D input and weight, got {xs:?}, {ws:?}"));
    }
    let groups = geom.groups.max(1);
    if xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != xs[1] {
        return Err(shape_err!(
            "conv3d channel mismatch: input {xs:?}, weight {ws:?}, groups {groups}"
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(shape_err!("conv3d bias {:?} for {} outputs", b.shape(), ws[0]));
        }
    }
    let input = [xs[2], xs[3], xs[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    let plan = Plan {
        batch: xs[0],
        cin: xs[1],
        cout: ws[0],
        groups,
        input,
        kernel,
        output: geom.output_dims(input, kernel)?,
        stride: geom.stride,
        padding: geom.padding,
    };

    let mut out = vec![T::zero(); plan.batch * plan.cout * plan.out_vox()];
    forward(&plan, x.value(), weight.value(), &mut out);
    if let Some(b) = bias {
        let b = b.value().as_slice().unwrap();
        let p = plan.out_vox();
        for chunk in out.chunks_mut(p).enumerate() {
            let bv = b[chunk.0 % plan.cout];
            chunk.1.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    let shape = [plan.batch, plan.cout, plan.output[0], plan.output[1], plan.output[2]];
    let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(value, parents, move |g, p, _| {
        let g = g.as_standard_layout();
        let g = g.as_slice().unwrap();
        let (gx, gw) = backward(
            &plan,
            p[0].value(),
            p[1].value(),
            g,
            p[0].requires_grad(),
            p[1].requires_grad(),
        );
        let mut grads = vec![
            gx.map(|v| ArrayD::from_shape_vec(IxDyn(p[0].shape()), v).unwrap()),
            gw.map(|v| ArrayD::from_shape_vec(IxDyn(p[1].shape()), v).unwrap()),
        ];
        if p.len() == 3 {
            grads.push(p[2].requires_grad().then(|| {
                let mut gb = vec![T::zero(); plan.cout];
                for (i, chunk) in g.chunks(plan.out_vox()).enumerate() {
                    gb[i % plan.cout] = gb[i % plan.cout] + chunk.iter().copied().sum::<T>();
                }
                ArrayD::from_shape_vec(IxDyn(&[plan.cout]), gb).unwrap()
            }));
        }
        grads
    }))
}

fn forward<T: Element>(plan: &Plan, x: &ArrayD<T>, w: &ArrayD<T>, out: &mut [T]) {
    let x = x.as_slice().expect("standard layout");
    let w = w.as_slice().expect("standard layout");
    let (cig, cog, k, p) = (plan.cig(), plan.cog(), plan.ksize(), plan.out_vox());
    let mut cols = vec![T::zero(); cig * k * p];
    for b in 0..plan.batch {
        for g in 0..plan.groups {
            let x_off = (b * plan.cin + g * cig) * plan.in_vox();
            im2col(plan, &x[x_off..x_off + cig * plan.in_vox()], &mut cols);
            let wm = ArrayView2::from_shape((cog, cig * k), &w[g * cog * cig * k..(g + 1) * cog * cig * k])
                .unwrap();
            let cm = ArrayView2::from_shape((cig * k, p), &cols[..]).unwrap();
            let o_off = (b * plan.cout + g * cog) * p;
            let mut om = ArrayViewMut2::from_shape((cog, p), &mut out[o_off..o_off + cog * p]).unwrap();
            general_mat_mul(T::one(), &wm, &cm, T::zero(), &mut om);
        }
    }
}

fn backward<T: Element>(
    plan: &Plan,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let x = x.as_slice().expect("standard layout");
    let w = w.as_slice().expect("standard layout");
    let (cig, cog, k, p) = (plan.cig(), plan.cog(), plan.ksize(), plan.out_vox());
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); cig * k * p];
    for b in 0..plan.batch {
        for gi in 0..plan.groups {
            let x_off = (b * plan.cin + gi * cig) * plan.in_vox();
            let o_off = (b * plan.cout + gi * cog) * p;
            let gm = ArrayView2::from_shape((cog, p), &g[o_off..o_off + cog * p]).unwrap();
            let w_range = gi * cog * cig * k..(gi + 1) * cog * cig * k;
            if let Some(gw) = gw.as_mut() {
                im2col(plan, &x[x_off..x_off + cig * plan.in_vox()], &mut cols);
                let cm = ArrayView2::from_shape((cig * k, p), &cols[..]).unwrap();
                let mut gwm = ArrayViewMut2::from_shape((cog, cig * k), &mut gw[w_range.clone()]).unwrap();
                general_mat_mul(T::one(), &gm, &cm.t(), T::one(), &mut gwm);
            }
            if let Some(gx) = gx.as_mut() {
                let wm = ArrayView2::from_shape((cog, cig * k), &w[w_range]).unwrap();
                let mut cm = ArrayViewMut2::from_shape((cig * k, p), &mut cols[..]).unwrap();
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut cm);
                col2im(plan, &cols, &mut gx[x_off..x_off + cig * plan.in_vox()]);
            }
        }
    }
    (gx, gw)
}

/// Input coordinate for output index `o` and kernel tap `t` along one axis.
#[inline]
fn source(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + t) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

fn im2col<T: Element>(plan: &Plan, x: &[T], cols: &mut [T]) {
    let [d, h, w] = plan.input;
    let [kd, kh, kw] = plan.kernel;
    let [od_n, oh_n, ow_n] = plan.output;
    let [sd, sh, sw] = plan.stride;
    let [pd, ph, pw] = plan.padding;
    let p = plan.out_vox();
    let mut row = 0;
    for c in 0..plan.cig() {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for bb in 0..kh {
                for cc in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    for od in 0..od_n {
                        let seg = &mut dst[od * oh_n * ow_n..(od + 1) * oh_n * ow_n];
                        let Some(id) = source(od, a, sd, pd, d) else {
                            seg.fill(T::zero());
                            continue;
                        };
                        for oh in 0..oh_n {
                            let line = &mut seg[oh * ow_n..(oh + 1) * ow_n];
                            let Some(ih) = source(oh, bb, sh, ph, h) else {
                                line.fill(T::zero());
                                continue;
                            };
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = match source(ow, cc, sw, pw, w) {
                                    Some(iw) => src[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(plan: &Plan, cols: &[T], gx: &mut [T]) {
    let [d, h, w] = plan.input;
    let [kd, kh, kw] = plan.kernel;
    let [od_n, oh_n, ow_n] = plan.output;
    let [sd, sh, sw] = plan.stride;
    let [pd, ph, pw] = plan.padding;
    let p = plan.out_vox();
    let mut row = 0;
    for c in 0..plan.cig() {
        let xc = &mut gx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for bb in 0..kh {
                for cc in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for od in 0..od_n {
                        let Some(id) = source(od, a, sd, pd, d) else { continue };
                        for oh in 0..oh_n {
                            let Some(ih) = source(oh, bb, sh, ph, h) else { continue };
                            let line = &src[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                            let dst = &mut xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for (ow, &v) in line.iter().enumerate() {
                                if let Some(iw) = source(ow, cc, sw, pw, w) {
                                    dst[iw] = dst[iw] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
