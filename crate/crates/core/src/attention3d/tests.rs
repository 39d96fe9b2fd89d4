use ndarray::{ArrayD, IxDyn};

use super::*;
use crate::autograd::testing::{grad_check, random_array};
use crate::nn::{Mode, ParamStore};

fn build<T: Element>(c: usize, cfg: &AttentionConfig, seed: u64) -> (ParamStore<T>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let attn = {
        let mut pb = ParamBuilder::new(&mut store, seed);
        MultiHeadAttention::new(&mut pb, "attn", c, cfg).unwrap()
    };
    // Nonzero biases so that degenerate paths are not trivially zero.
    for n in ["q", "k", "v", "proj"] {
        let name = format!("attn.{n}.bias");
        let b = random_array(&[c], seed + 100).mapv(|v| cast::<T>(0.1 * v));
        store.set_value(&name, b).unwrap();
    }
    (store, attn)
}

/// Channel-last random field `(B, D, H, W, C)`.
fn field<T: Element>(b: usize, dims: [usize; 3], c: usize, seed: u64) -> ArrayD<T> {
    random_array(&[b, dims[0], dims[1], dims[2], c], seed).mapv(cast::<T>)
}

fn run<T: Element>(store: &ParamStore<T>, attn: &MultiHeadAttention, x: &ArrayD<T>) -> ArrayD<T> {
    let s = Session::new(store, Mode::Eval, false);
    attn.forward(&s, &Var::constant(x.clone())).unwrap().value().clone()
}

fn max_abs_diff<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().to_f64().unwrap()).fold(0.0, f64::max)
}

fn variant(v: AttentionVariant, heads: usize) -> AttentionConfig {
    AttentionConfig::new(heads, v)
}

/// Direct attention from the definition: each token attends to the real tokens
/// `related` to it, with the stored projections, in f64.
fn oracle(store: &ParamStore<f64>, x: &ArrayD<f64>, heads: usize, related: impl Fn([usize; 3], [usize; 3]) -> bool) -> ArrayD<f64> {
    let sh = x.shape().to_vec();
    let (dims, c) = ([sh[1], sh[2], sh[3]], sh[4]);
    let dh = c / heads;
    let lin = |n: &str, t: &[f64]| -> Vec<f64> {
        let w = store.value(&format!("attn.{n}.weight")).unwrap();
        let b = store.value(&format!("attn.{n}.bias")).unwrap();
        (0..c).map(|o| b[[o]] + (0..c).map(|i| w[[o, i]] * t[i]).sum::<f64>()).collect()
    };
    let positions: Vec<[usize; 3]> = (0..dims.iter().product())
        .map(|i| unravel(i, dims))
        .collect();
    let tok = |p: [usize; 3]| -> Vec<f64> { (0..c).map(|k| x[[0, p[0], p[1], p[2], k]]).collect() };
    let mut out = ArrayD::zeros(IxDyn(&sh));
    for &p in &positions {
        let q = lin("q", &tok(p));
        let keys: Vec<[usize; 3]> = positions.iter().copied().filter(|&r| related(p, r)).collect();
        let ks: Vec<Vec<f64>> = keys.iter().map(|&r| lin("k", &tok(r))).collect();
        let vs: Vec<Vec<f64>> = keys.iter().map(|&r| lin("v", &tok(r))).collect();
        let mut mixed = vec![0.0; c];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = ks
                .iter()
                .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, v) in vs.iter().enumerate() {
                for i in r.clone() {
                    mixed[i] += e[j] / z * v[i];
                }
            }
        }
        let o = lin("proj", &mixed);
        for k in 0..c {
            out[[0, p[0], p[1], p[2], k]] = o[k];
        }
    }
    out
}

#[test]
fn single_token_is_projected_value() {
    let (store, attn) = build::<f64>(6, &AttentionConfig::dense(2), 1);
    let x = field::<f64>(1, [1, 1, 1], 6, 2);
    let got = run(&store, &attn, &x);
    let s = Session::new(&store, Mode::Eval, false);
    let xv = Var::constant(x);
    let want = attn.proj.forward(&s, &attn.v.forward(&s, &xv).unwrap()).unwrap();
    assert!(max_abs_diff(&got, want.value()) < 1e-12);
}

#[test]
fn dense_matches_hand_arithmetic() {
    let (mut store, attn) = build::<f64>(2, &AttentionConfig::dense(1), 1);
    let eye = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    for n in ["q", "k", "v", "proj"] {
        store.set_value(&format!("attn.{n}.weight"), eye.clone()).unwrap();
        store.set_value(&format!("attn.{n}.bias"), ArrayD::zeros(IxDyn(&[2]))).unwrap();
    }
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1, 2]), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let got = run(&store, &attn, &x);
    // Token a = (1, 0) scores a.a = 1 and a.b = 0; token b = (0, 2) scores 0 and 4.
    // Logits are scaled by 1/sqrt(2); pa, pb are the weights each token puts on a.
    let r = 2f64.sqrt();
    let pa = (1.0 / r).exp() / ((1.0 / r).exp() + 1.0);
    let pb = 1.0 / (1.0 + (4.0 / r).exp());
    let want = [pa, 2.0 * (1.0 - pa), pb, 2.0 * (1.0 - pb)];
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((g - w).abs() < 1e-6, "{g} vs {w}");
    }
}

#[test]
fn dense_is_permutation_equivariant() {
    let (store, attn) = build::<f32>(8, &AttentionConfig::dense(2), 3);
    let x = field::<f32>(1, [6, 1, 1], 8, 4);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut xp = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        xp.slice_mut(ndarray::s![0, i, 0, 0, ..]).assign(&x.slice(ndarray::s![0, p, 0, 0, ..]));
    }
    let y = run(&store, &attn, &x);
    let yp = run(&store, &attn, &xp);
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..8 {
            assert!((yp[[0, i, 0, 0, k]] - y[[0, p, 0, 0, k]]).abs() < 1e-6);
        }
    }
}

#[test]
fn degenerate_configs_equal_dense() {
    let dims = [2, 4, 4];
    let x = field::<f32>(1, dims, 16, 7);
    let (ds, dense) = build::<f32>(16, &AttentionConfig::dense(2), 9);
    let reference = run(&ds, &dense, &x);
    for v in [
        AttentionVariant::Swin { window: dims, shift: [0; 3] },
        AttentionVariant::Sra { reduction_ratio: 1 },
        AttentionVariant::Psa { pool_ratios: vec![1] },
        AttentionVariant::Gsa { grid: dims },
    ] {
        let (st, a) = build::<f32>(16, &variant(v.clone(), 2), 9);
        let d = max_abs_diff(&run(&st, &a, &x), &reference);
        assert!(d <= 1e-5, "{v:?}: {d}");
    }
}

#[test]
fn grouped_variants_match_direct_oracle_with_padding_and_shift() {
    let dims = [3, 5, 4];
    let x = field::<f64>(1, dims, 4, 11);
    let (w, s) = ([2, 2, 2], [1, 1, 1]);
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Swin { window: w, shift: s }, 2), 12);
    let p = [0, 1, 2].map(|i| dims[i].div_ceil(w[i]) * w[i]);
    let key = move |q: [usize; 3]| {
        [0, 1, 2].map(|i| {
            let r = (q[i] + p[i] - s[i]) % p[i];
            (r / w[i], r >= p[i] - s[i])
        })
    };
    let want = oracle(&st, &x, 2, |q, k| key(q) == key(k));
    assert!(max_abs_diff(&run(&st, &a, &x), &want) < 1e-10);

    let grid = [2, 2, 3];
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Gsa { grid }, 2), 13);
    let cell = [0, 1, 2].map(|i| dims[i].div_ceil(grid[i]));
    let want = oracle(&st, &x, 2, |q, k| (0..3).all(|i| q[i] % cell[i] == k[i] % cell[i]));
    assert!(max_abs_diff(&run(&st, &a, &x), &want) < 1e-10);
}

#[test]
fn unit_grid_reduces_to_per_token_projection() {
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Gsa { grid: [1, 1, 1] }, 1), 2);
    let x = field::<f64>(1, [2, 3, 3], 4, 3);
    let want = oracle(&st, &x, 1, |q, k| q == k);
    assert!(max_abs_diff(&run(&st, &a, &x), &want) < 1e-12);
}

/// Input-gradient magnitude at every token for a unit seed on output token `at`.
fn token_dependence(store: &ParamStore<f64>, attn: &MultiHeadAttention, x: &ArrayD<f64>, at: [usize; 3]) -> ArrayD<f64> {
    let s = Session::new(store, Mode::Eval, false);
    let xv = Var::leaf(x.clone());
    let y = attn.forward(&s, &xv).unwrap();
    let mut seed = ArrayD::zeros(IxDyn(y.shape()));
    seed.slice_mut(ndarray::s![0, at[0], at[1], at[2], ..]).fill(1.0);
    let g = y.backward_with(seed).get_or_zeros(&xv);
    g.map_axis(ndarray::Axis(4), |r| r.iter().map(|v| v.abs()).sum::<f64>())
}

#[test]
fn windows_have_zero_mutual_gradient() {
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Swin { window: [2; 3], shift: [0; 3] }, 1), 5);
    let x = field::<f64>(1, [4, 4, 4], 4, 6);
    let dep = token_dependence(&st, &a, &x, [1, 2, 3]);
    for ((_, d, h, w), &v) in dep.clone().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
        let same = d / 2 == 0 && h / 2 == 1 && w / 2 == 1;
        assert_eq!(v != 0.0, same, "token ({d},{h},{w})");
    }
}

#[test]
fn shifted_windows_mask_cross_boundary_gradients_exactly() {
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Swin { window: [2; 3], shift: [1; 3] }, 1), 5);
    let x = field::<f64>(1, [4, 4, 4], 4, 6);
    let key = |q: [usize; 3]| [0, 1, 2].map(|i| {
        let r = (q[i] + 4 - 1) % 4;
        (r / 2, r >= 3)
    });
    for at in [[0, 0, 0], [3, 3, 3], [1, 2, 0]] {
        let dep = token_dependence(&st, &a, &x, at);
        for ((_, d, h, w), &v) in dep.clone().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
            let related = key(at) == key([d, h, w]);
            assert_eq!(v != 0.0, related, "output {at:?}, input ({d},{h},{w})");
        }
    }
}

#[test]
fn grid_groups_are_dispersed_with_stride_two() {
    let (st, a) = build::<f64>(4, &variant(AttentionVariant::Gsa { grid: [2; 3] }, 1), 8);
    let x = field::<f64>(1, [4, 4, 4], 4, 9);
    let dep = token_dependence(&st, &a, &x, [1, 0, 3]);
    let mut members = 0;
    for ((_, d, h, w), &v) in dep.clone().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
        let same = d % 2 == 1 && h % 2 == 0 && w % 2 == 1;
        assert_eq!(v != 0.0, same);
        members += same as usize;
    }
    assert_eq!(members, 8);
}

fn key_count(cfg: AttentionConfig, dims: [usize; 3]) -> (usize, ArrayD<f32>) {
    let (st, a) = build::<f32>(8, &cfg, 1);
    let s = Session::new(&st, Mode::Eval, false);
    s.capture_attention();
    a.forward(&s, &Var::constant(field::<f32>(1, dims, 8, 2))).unwrap();
    let maps = s.attention_maps();
    let p = maps[0].clone();
    (*p.shape().last().unwrap(), p)
}

#[test]
fn reduced_key_counts() {
    assert_eq!(key_count(variant(AttentionVariant::Sra { reduction_ratio: 2 }, 2), [3, 4, 4]).0, 3 * 2 * 2);
    assert_eq!(key_count(variant(AttentionVariant::Psa { pool_ratios: vec![1, 2] }, 2), [2, 4, 4]).0, 40);
}

#[test]
fn attention_rows_sum_to_one() {
    for v in [
        AttentionVariant::Dense,
        AttentionVariant::Swin { window: [2, 2, 2], shift: [1, 1, 1] },
        AttentionVariant::Sra { reduction_ratio: 2 },
        AttentionVariant::Psa { pool_ratios: vec![1, 2, 3] },
        AttentionVariant::Gsa { grid: [2, 2, 2] },
    ] {
        let (_, p) = key_count(variant(v.clone(), 2), [3, 5, 5]);
        let n = *p.shape().last().unwrap();
        for row in p.as_slice().unwrap().chunks(n) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{v:?}: {s}");
        }
    }
}

#[test]
fn constant_fields_stay_constant() {
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[1, 4, 4, 4, 8]));
    for (i, v) in x.iter_mut().enumerate() {
        *v = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3][i % 8];
    }
    for v in [
        AttentionVariant::Swin { window: [2; 3], shift: [1; 3] },
        AttentionVariant::Sra { reduction_ratio: 2 },
        AttentionVariant::Psa { pool_ratios: vec![1, 2] },
        AttentionVariant::Gsa { grid: [2; 3] },
    ] {
        let (st, a) = build::<f32>(8, &variant(v.clone(), 2), 4);
        let y = run(&st, &a, &x);
        let first: Vec<f32> = y.slice(ndarray::s![0, 0, 0, 0, ..]).to_vec();
        for t in y.as_slice().unwrap().chunks(8) {
            for (a, b) in t.iter().zip(&first) {
                assert!((a - b).abs() < 1e-5, "{v:?}");
            }
        }
    }
}

#[test]
fn relative_bias_is_applied_and_zero_table_is_neutral() {
    let mut cfg = variant(AttentionVariant::Gsa { grid: [2, 2, 2] }, 2);
    let plain = build::<f64>(4, &cfg, 3);
    cfg.relative_bias = true;
    let (mut st, a) = build::<f64>(4, &cfg, 3);
    let x = field::<f64>(1, [3, 4, 4], 4, 5);
    let with_bias = run(&st, &a, &x);
    st.set_value("attn.relative_bias", ArrayD::zeros(IxDyn(&[27, 2]))).unwrap();
    // Registration order differs only after the projections, so they coincide.
    let d = max_abs_diff(&run(&st, &a, &x), &run(&plain.0, &plain.1, &x));
    assert!(d < 1e-12);
    assert!(max_abs_diff(&with_bias, &run(&st, &a, &x)) > 0.0);
    assert!(AttentionConfig { relative_bias: true, ..AttentionConfig::dense(1) }.validate(4).is_err());
}

#[test]
fn config_validation() {
    assert!(AttentionConfig::dense(3).validate(8).is_err());
    assert!(variant(AttentionVariant::Swin { window: [2; 3], shift: [2, 0, 0] }, 1).validate(4).is_err());
    assert!(variant(AttentionVariant::Swin { window: [0, 2, 2], shift: [0; 3] }, 1).validate(4).is_err());
    assert!(variant(AttentionVariant::Sra { reduction_ratio: 0 }, 1).validate(4).is_err());
    assert!(variant(AttentionVariant::Psa { pool_ratios: vec![] }, 1).validate(4).is_err());
    assert!(variant(AttentionVariant::Gsa { grid: [1, 0, 1] }, 1).validate(4).is_err());
}

fn block<T: Element>(c: usize, cfg: &AttentionConfig, seed: u64) -> (ParamStore<T>, TransformerBlock) {
    let mut store = ParamStore::new();
    let b = {
        let mut pb = ParamBuilder::new(&mut store, seed);
        TransformerBlock::new(&mut pb, "blk", c, cfg, 4).unwrap()
    };
    (store, b)
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let cfg = variant(AttentionVariant::Gsa { grid: [7, 7, 7] }, 3);
    let (mut st, b) = block::<f32>(48, &cfg, 1);
    for n in ["blk.attn.proj.weight", "blk.attn.proj.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
        let shape = st.value(n).unwrap().shape().to_vec();
        st.set_value(n, ArrayD::zeros(IxDyn(&shape))).unwrap();
    }
    let x = random_array(&[2, 48, 14, 28, 28], 3).mapv(|v| v as f32);
    let s = Session::eval(&st);
    let y = b.forward_channels_first(&s, &Var::constant(x.clone())).unwrap();
    assert_eq!(y.shape(), &[2, 48, 14, 28, 28]);
    assert_eq!(y.value(), &x);
}

#[test]
fn block_gradient_matches_finite_differences() {
    let cfg = variant(AttentionVariant::Gsa { grid: [2, 1, 2] }, 2);
    let (st, b) = block::<f64>(8, &cfg, 2);
    let x = random_array(&[1, 8, 2, 2, 2], 4);
    let s = Session::eval(&st);
    let err = grad_check(&[x], |v| b.forward_channels_first(&s, &v[0]).unwrap(), 1e-5);
    assert!(err <= 1e-3, "{err}");
}
