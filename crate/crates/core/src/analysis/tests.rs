use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::attention3d::AttentionVariant;
use crate::autograd::testing::random_array;
use crate::autograd::Var;
use crate::drformer::DrFormerConfig;
use crate::nn::{Conv3d, ParamBuilder, ParamStore, Stream};
use crate::sdrformer::{SdrFormer, SdrFormerConfig};
use crate::trainer::{compute_metrics, RocCurve};
use crate::volforge::{synthesize_samples, MultiPhaseSample, SynthConfig};

fn tiny(n: usize) -> SdrFormerConfig {
    SdrFormerConfig {
        backbone: DrFormerConfig::tiny(vec![4, 8], 2, AttentionVariant::Gsa { grid: [2, 2, 2] }),
        n_phases: n,
        num_classes: 2,
        ..SdrFormerConfig::default()
    }
}

fn sample(n: usize, seed: u64) -> MultiPhaseSample {
    let cfg = SynthConfig::new(2, n, 2, [4, 16, 16], 1.0, 0.1, seed);
    synthesize_samples(&cfg).unwrap().remove(0).normalized()
}

#[test]
fn single_conv_mac_count() {
    let mut store = ParamStore::<f32>::new();
    let conv = Conv3d::k3(&mut ParamBuilder::new(&mut store, 0), "c", 1, 8, [1, 1, 1], false);
    let out = conv.output_dims([14, 112, 112]).unwrap();
    assert_eq!(out, [14, 112, 112]);
    let taps_per_output = 3 * 3 * 3 * 1;
    let expected: u64 = taps_per_output * 8 * 14 * 112 * 112;
    assert_eq!(expected, 37_933_056);
    assert_eq!(conv.macs(out.iter().product()), expected);
}

#[test]
fn profile_totals_are_additive_and_exact() {
    let cfg = tiny(3);
    let r = profile(&cfg, [4, 32, 32]).unwrap();
    assert_eq!(r.macs, r.breakdown.iter().map(|c| c.macs).sum::<u64>());
    assert_eq!(r.params, r.breakdown.iter().map(|c| c.params).sum::<usize>());
    let (_, store) = SdrFormer::init::<f32>(&cfg, 5).unwrap();
    assert_eq!(r.params, store.num_trainable());
    assert!((r.flops_g - 2.0 * r.macs as f64 / 1e9).abs() < 1e-15);
    let b = r.baseline.as_ref().unwrap();
    assert!(b.params < r.params && b.macs < r.macs);
    assert!(b.flops_overhead > 0.0 && b.params_overhead > 0.0);
    assert!(r.to_text().contains("overhead"));
    assert!(profile(&cfg.baseline(), [4, 32, 32]).unwrap().baseline.is_none());
}

#[test]
fn profile_is_batch_free() {
    let cfg = tiny(3);
    let one = profile_input(&cfg, &[1, 3, 1, 4, 32, 32]).unwrap();
    let two = profile_input(&cfg, &[2, 3, 1, 4, 32, 32]).unwrap();
    assert_eq!(one, two);
    assert!(profile_input(&cfg, &[1, 2, 1, 4, 32, 32]).is_err());
    assert!(profile(&cfg, [4, 30, 30]).is_err());
}

#[test]
fn zero_gradients_give_zero_heat() {
    let act = random_array(&[3, 2, 4, 4], 1).into_dimensionality::<ndarray::Ix4>().unwrap();
    let cam = grad_cam_map(act.view(), Array4::zeros((3, 2, 4, 4)).view()).unwrap();
    let mut heat = cam.mapv(|v| v as f32);
    max_normalize(&mut heat);
    assert!(heat.iter().all(|&v| v == 0.0));
    let mut nan = Array4::<f64>::zeros((3, 2, 4, 4));
    nan[[0, 0, 0, 0]] = f64::NAN;
    assert!(grad_cam_map(act.view(), nan.view()).is_err());
}

#[test]
fn linear_single_channel_closed_form() {
    // logit = sum(W * A) / V, so dlogit/dA = W / V and the channel weight is mean(W) / V.
    let shape = [1, 2, 3, 3];
    let a = random_array(&shape, 2);
    let w = random_array(&shape, 3).mapv(|v| v + 0.3);
    let vox = 18.0;
    let leaf = Var::leaf(a.clone());
    let logit = leaf.mul(&Var::constant(w.clone())).unwrap().sum_all().scale(1.0 / vox);
    let grads = logit.backward();
    let g = grads.get(&leaf).unwrap().clone();
    let a4 = a.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
    let cam = grad_cam_map(a4.view(), g.into_dimensionality::<ndarray::Ix4>().unwrap().view()).unwrap();
    let alpha = w.iter().sum::<f64>() / vox / vox;
    for (c, x) in cam.iter().zip(a.iter()) {
        assert!((c - (alpha * x).max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn gradcam_volumes_per_phase() {
    let (model, store) = SdrFormer::init::<f32>(&tiny(3), 7).unwrap();
    let s = sample(3, 8);
    for stream in [Stream::High, Stream::Low] {
        for stage in [1, 2] {
            let maps = gradcam3d(&model, &store, &s, 1, stream, stage).unwrap();
            assert_eq!(maps.len(), 3);
            for (p, m) in maps.iter().enumerate() {
                assert_eq!(m.phase, p);
                assert_eq!(m.heat.shape(), &[4, 16, 16]);
                assert!(m.heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let max = m.heat.iter().cloned().fold(0.0f32, f32::max);
                assert!(max == 0.0 || (max - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(gradcam3d(&model, &store, &s, 1, Stream::High, 3).is_err());
    assert!(gradcam3d(&model, &store, &s, 1, Stream::High, 0).is_err());
    assert!(gradcam3d(&model, &store, &s, 1, Stream::Merged, 1).is_err());
    assert!(gradcam3d(&model, &store, &s, 2, Stream::High, 1).is_err());
}

#[test]
fn occlusion_map_shape_and_determinism() {
    let (model, store) = SdrFormer::init::<f32>(&tiny(2), 9).unwrap();
    let s = sample(2, 10);
    let a = occlusion_sensitivity(&model, &store, &s, 0, 8, 8).unwrap();
    assert_eq!(a.shape(), &[4, 16, 16]);
    assert_eq!(a, occlusion_sensitivity(&model, &store, &s, 0, 8, 8).unwrap());
    // One 8^3 block covers the whole 4x8x8 quadrant, so each quadrant is constant.
    assert!(a.slice(ndarray::s![.., 0..8, 0..8]).iter().all(|&v| v == a[[0, 0, 0]]));
    assert!(occlusion_sensitivity(&model, &store, &s, 0, 0, 8).is_err());
}

#[test]
fn iou_and_mask_ratio_examples() {
    let a = Array3::from_shape_fn((1, 1, 10), |(_, _, i)| i as f32);
    let rev = Array3::from_shape_fn((1, 1, 10), |(_, _, i)| (9 - i) as f32);
    assert_eq!(top_fraction_iou(&a, &a, 0.2).unwrap(), 1.0);
    assert_eq!(top_fraction_iou(&a, &rev, 0.2).unwrap(), 0.0);
    // Top 3 of each: {7,8,9} vs {6,7,8} share 2 of 4.
    let shifted = Array3::from_shape_fn((1, 1, 10), |(_, _, i)| if i == 9 { 0.0 } else { i as f32 });
    assert_eq!(top_fraction_iou(&a, &shifted, 0.3).unwrap(), 0.5);
    let mask = Array3::from_shape_fn((1, 1, 10), |(_, _, i)| if i >= 5 { 1.0 } else { 0.0 });
    // Inside mean 7, outside mean 2.
    assert!((mask_heat_ratio(&a, &mask).unwrap() - 3.5).abs() < 1e-12);
    assert_eq!(mask_heat_ratio(&a, &Array3::zeros((1, 1, 10))), None);
}

#[test]
fn tied_untrained_model_gives_uniform_coefficients() {
    let n = 3;
    let (model, mut store) = SdrFormer::init::<f32>(&tiny(n), 11).unwrap();
    model.tie_apsm_branches(&mut store).unwrap();
    let mut s = sample(1, 12);
    s.phases = (0..n)
        .map(|p| {
            let mut v = s.phases[0].clone();
            v.phase_name = format!("phase{p}");
            v
        })
        .collect();
    let recs = phase_coefficients(&model, &store, &s).unwrap();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        for m in r.phase_means() {
            assert!((m - 1.0 / 3.0).abs() < 1e-6);
        }
    }
}

#[test]
fn coefficient_export_files() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = SdrFormer::init::<f32>(&tiny(3), 13).unwrap();
    let s = sample(3, 14);
    let CoefficientOutcome::Exported(files) = export_phase_coefficients(&model, &store, &s, dir.path()).unwrap() else {
        panic!("expected export");
    };
    assert_eq!(files.len(), 3);
    let parsed: CoefficientFile = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(parsed.phase_names.len(), 3);
    for st in &parsed.streams {
        assert!((st.phase_means.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(st.coefficients.len(), 3);
        assert_eq!(st.coefficients[0].len(), 8);
    }
    let png = image::open(&files[1]).unwrap();
    assert_eq!((png.width(), png.height()), (8 * 6, 3 * 6));

    let (single, sstore) = SdrFormer::init::<f32>(&tiny(1), 13).unwrap();
    let one = dir.path().join("single");
    match export_phase_coefficients(&single, &sstore, &sample(1, 15), &one).unwrap() {
        CoefficientOutcome::NotApplicable(why) => assert!(why.contains("single-phase")),
        other => panic!("{other:?}"),
    }
    assert!(std::fs::read_to_string(one.join("not_applicable.txt")).unwrap().starts_with("not applicable"));
}

#[test]
fn perfect_roc_export() {
    let labels = vec![0, 0, 1, 1];
    let probs = vec![vec![0.9, 0.1], vec![0.7, 0.3], vec![0.4, 0.6], vec![0.2, 0.8]];
    let report = compute_metrics(&labels, &probs, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.csv");
    roc_export(&report, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("class,threshold,fpr,tpr\n"));
    let curves = read_roc_csv(&path).unwrap();
    assert_eq!(curves.len(), 1);
    let pts: Vec<(f64, f64)> = curves[0].points.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
}

#[test]
fn roc_export_requires_scores() {
    let labels = vec![1, 1];
    let report = compute_metrics(&labels, &[vec![0.2, 0.8], vec![0.4, 0.6]], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = roc_export(&report, dir.path().join("x.csv")).unwrap_err();
    assert!(err.to_string().contains("missing scores"));
}

#[test]
fn random_scores_export_near_chance() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
    let probs: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let p: f64 = rng.random();
            vec![1.0 - p, p]
        })
        .collect();
    let report = compute_metrics(&labels, &probs, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.csv");
    roc_export(&report, &path).unwrap();
    let auc = read_roc_csv(&path).unwrap()[0].trapezoid_auc();
    assert!((auc - 0.5).abs() < 0.05, "{auc}");
    assert!((auc - report.auc.unwrap()).abs() < 1e-6);
}

fn monotone(c: &RocCurve) -> bool {
    c.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exported_curves_round_trip(seed in 0u64..5000, n in 6usize..80) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[..3].copy_from_slice(&[0, 1, 2]);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..10) as f64 / 9.0).collect()).collect();
        let report = compute_metrics(&labels, &probs, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        roc_export(&report, &path).unwrap();
        let back = read_roc_csv(&path).unwrap();
        prop_assert_eq!(back.len(), 3);
        for (c, orig) in back.iter().zip(&report.roc) {
            prop_assert!(monotone(c));
            prop_assert!((c.trapezoid_auc() - report.per_class[c.class].auc.unwrap()).abs() < 1e-9);
            prop_assert_eq!(c.points.len(), orig.points.len());
        }
    }

    #[test]
    fn heat_is_bounded(seed in 0u64..5000) {
        let act = random_array(&[4, 2, 3, 3], seed).into_dimensionality::<ndarray::Ix4>().unwrap();
        let grad = random_array(&[4, 2, 3, 3], seed + 1).into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut heat = grad_cam_map(act.view(), grad.view()).unwrap().mapv(|v| v as f32);
        max_normalize(&mut heat);
        prop_assert!(heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = heat.iter().cloned().fold(0.0f32, f32::max);
        prop_assert!(max == 0.0 || max == 1.0);
    }
}
