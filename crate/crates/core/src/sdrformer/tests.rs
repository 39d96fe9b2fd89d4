use ndarray::{Array3, ArrayD, IxDyn};
use proptest::prelude::*;

use super::*;
use crate::attention3d::AttentionVariant;
use crate::autograd::testing::{grad_check, random_array};
use crate::drformer::DrFormerClassifier;
use crate::nn::{Mode, NORM_EPS};
use crate::volforge::{PhaseVolume, Split};

fn arr<T: Element>(shape: &[usize], seed: u64) -> ArrayD<T> {
    random_array(shape, seed).mapv(cast::<T>)
}

fn max_abs_diff<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().to_f64().unwrap()).fold(0.0, f64::max)
}

fn tiny(n: usize) -> SdrFormerConfig {
    SdrFormerConfig {
        backbone: DrFormerConfig::tiny(vec![4, 8], 2, AttentionVariant::Gsa { grid: [2, 2, 2] }),
        n_phases: n,
        num_classes: 3,
        ..SdrFormerConfig::default()
    }
}

fn fusion<T: Element>(n: usize, c: usize, seed: u64) -> (ParamStore<T>, PhaseFusion) {
    let mut store = ParamStore::new();
    let f = PhaseFusion::new(&mut ParamBuilder::new(&mut store, seed), "fusion", n, c, true).unwrap();
    (store, f)
}

#[test]
fn coefficients_are_a_softmax_over_phases() {
    for n in [2, 3, 8] {
        let (store, f) = fusion::<f64>(n, 4, n as u64);
        let s = Session::eval(&store);
        let x = Var::constant(arr::<f64>(&[2, n * 4, 2, 3, 3], 40 + n as u64).mapv(|v| 5.0 * v));
        let p = f.apsm.as_ref().unwrap().coefficients(&s, &x).unwrap();
        assert_eq!(p.shape(), &[2, n, 4]);
        let ids = vec!["a".to_string(), "b".to_string()];
        for r in PhaseAttentionRecord::from_batch(Stream::High, p.value(), &ids).unwrap() {
            r.validate(1e-6).unwrap();
        }
    }
}

#[test]
fn tied_branches_give_uniform_coefficients() {
    let (mut store, f) = fusion::<f64>(3, 4, 1);
    let apsm = f.apsm.as_ref().unwrap();
    let w0 = store.value(&apsm.branches[0].weight).unwrap().clone();
    for br in &apsm.branches[1..] {
        store.set_value(&br.weight, w0.clone()).unwrap();
    }
    let s = Session::eval(&store);
    let p = apsm.coefficients(&s, &Var::constant(arr::<f64>(&[2, 12, 2, 2, 2], 2))).unwrap();
    assert!(p.value().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn common_shift_of_descriptors_leaves_coefficients_unchanged() {
    let (mut store, f) = fusion::<f64>(3, 4, 3);
    let apsm = f.apsm.as_ref().unwrap();
    let x = Var::constant(arr::<f64>(&[1, 12, 2, 2, 2], 4));
    let before = apsm.coefficients(&Session::eval(&store), &x).unwrap().value().clone();
    let shift = arr::<f64>(&[4], 5).mapv(|v| 7.0 * v);
    for br in &apsm.branches {
        let name = br.bias.as_ref().unwrap();
        let b = store.value(name).unwrap() + &shift;
        store.set_value(name, b).unwrap();
    }
    let after = apsm.coefficients(&Session::eval(&store), &x).unwrap().value().clone();
    assert!(max_abs_diff(&before, &after) < 1e-12);
}

#[test]
fn phase_fusion_gradient_matches_finite_differences() {
    let (store, f) = fusion::<f64>(3, 4, 6);
    let s = Session::new(&store, Mode::Train, false);
    let maps: Vec<ArrayD<f64>> = (0..3).map(|k| random_array(&[1, 4, 2, 4, 4], 7 + k)).collect();
    let err = grad_check(&maps, |v| f.forward(&s, &concat(v, 1).unwrap(), Stream::High).unwrap(), 1e-5);
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn fusion_requires_two_phases() {
    let mut store = ParamStore::<f32>::new();
    assert!(PhaseFusion::new(&mut ParamBuilder::new(&mut store, 0), "f", 1, 4, true).is_err());
}

#[test]
fn one_backbone_drives_any_phase_count() {
    let mut backbones = Vec::new();
    for n in [1, 3, 8] {
        let (model, store) = SdrFormer::init::<f32>(&tiny(n), 11).unwrap();
        let s = Session::eval(&store);
        let logits = model.forward(&s, &Var::constant(arr::<f32>(&[2, n, 1, 2, 16, 16], 12))).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        let bb: Vec<(String, ArrayD<f32>)> = store
            .iter()
            .filter(|(k, _)| k.starts_with("backbone."))
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect();
        let extra: usize = store.iter().filter(|(k, _)| k.starts_with("fusion.")).map(|(_, p)| p.value.len()).sum();
        assert_eq!(extra == 0, n == 1);
        backbones.push(bb);
    }
    assert_eq!(backbones[0], backbones[1]);
    assert_eq!(backbones[1], backbones[2]);
}

#[test]
fn single_phase_equals_standalone_classifier_exactly() {
    let cfg = tiny(1);
    let (model, store) = SdrFormer::init::<f64>(&cfg, 13).unwrap();
    let mut standalone_cfg = cfg.backbone.clone();
    standalone_cfg.num_classes = Some(3);
    let mut store2 = ParamStore::<f64>::new();
    let standalone = DrFormerClassifier::new(&mut ParamBuilder::new(&mut store2, 99), &standalone_cfg).unwrap();
    // Same parameter names; drive both from one store.
    assert_eq!(store.names().collect::<Vec<_>>(), store2.names().collect::<Vec<_>>());
    let x = arr::<f64>(&[2, 1, 1, 2, 16, 16], 14);
    let a = model.forward(&Session::eval(&store), &Var::constant(x.clone())).unwrap();
    let flat = x.into_shape_with_order(IxDyn(&[2, 1, 2, 16, 16])).unwrap();
    let b = standalone.forward(&Session::eval(&store), &Var::constant(flat)).unwrap();
    assert_eq!(a.value(), b.value());
}

/// Identity `W3` for each phase block: the center tap passes channel `j` of
/// every phase to output `j`; the batch norm is an exact identity.
fn sum_of_phases_w3(store: &mut ParamStore<f64>, name: &str, n: usize, c: usize) {
    let mut w = ArrayD::zeros(IxDyn(&[c, n * c, 3, 3, 3]));
    for k in 0..n {
        for j in 0..c {
            w[[j, k * c + j, 1, 1, 1]] = 1.0;
        }
    }
    store.set_value(&format!("{name}.w3.conv.weight"), w).unwrap();
    store.set_value(&format!("{name}.w3.bn.running_var"), ArrayD::from_elem(IxDyn(&[c]), 1.0 - NORM_EPS)).unwrap();
}

#[test]
fn identical_phases_with_tied_init_reduce_to_single_phase() {
    let n = 3;
    let cfg = tiny(n);
    let (model, mut store) = SdrFormer::init::<f64>(&cfg, 15).unwrap();
    model.tie_apsm_branches(&mut store).unwrap();
    for name in ["fusion.high", "fusion.low"] {
        sum_of_phases_w3(&mut store, name, n, 8);
    }
    let one = arr::<f64>(&[2, 1, 1, 2, 16, 16], 16);
    let views: Vec<_> = (0..n).map(|_| one.view()).collect();
    let x = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
    let s = Session::eval(&store);
    let logits = model.forward(&s, &Var::constant(x)).unwrap();
    for (_, p) in s.phase_weights() {
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }
    let (single, _) = SdrFormer::init::<f64>(&tiny(1), 15).unwrap();
    let reference = single.forward(&Session::eval(&store), &Var::constant(one)).unwrap();
    assert!(max_abs_diff(logits.value(), reference.value()) < 1e-10);
}

#[test]
fn records_per_stream_and_after_merge() {
    let (model, store) = SdrFormer::init::<f32>(&tiny(3), 17).unwrap();
    let s = Session::eval(&store);
    model.forward(&s, &Var::constant(arr::<f32>(&[2, 3, 1, 2, 16, 16], 18))).unwrap();
    let ids = vec!["s0".to_string(), "s1".to_string()];
    let recs = collect_records(&s, &ids).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.iter().filter(|r| r.stream == Stream::High).count(), 2);
    assert!(recs.iter().all(|r| r.n_phases() == 3 && r.coefficients[0].len() == 8));
    for r in &recs {
        r.validate(1e-6).unwrap();
        assert!((r.phase_means().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let cfg = SdrFormerConfig {
        fusion: FusionPlacement::AfterMerge,
        ..tiny(3)
    };
    let (model, store) = SdrFormer::init::<f32>(&cfg, 19).unwrap();
    let s = Session::eval(&store);
    let logits = model.forward(&s, &Var::constant(arr::<f32>(&[2, 3, 1, 2, 16, 16], 20))).unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
    let w = s.phase_weights();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].0, Stream::Merged);
    assert_eq!(w[0].1.shape(), &[2, 3, 16]);
}

#[test]
fn apsm_toggle_changes_only_apsm_parameters() {
    let (_, full) = SdrFormer::init::<f32>(&tiny(3), 21).unwrap();
    let cfg = SdrFormerConfig {
        apsm_enabled: false,
        ..tiny(3)
    };
    let (model, base) = SdrFormer::init::<f32>(&cfg, 21).unwrap();
    let removed: Vec<&String> = full.names().filter(|n| base.get(n).is_none()).collect();
    assert!(!removed.is_empty() && removed.iter().all(|n| n.contains(".apsm.")));
    assert!(base.names().all(|n| full.get(n).is_some_and(|p| p.value.shape() == base.value(n).unwrap().shape())));
    let s = Session::eval(&base);
    model.forward(&s, &Var::constant(arr::<f32>(&[1, 3, 1, 2, 16, 16], 22))).unwrap();
    assert!(s.phase_weights().is_empty());
    assert!(base.num_trainable() < full.num_trainable());
}

#[test]
fn wrong_phase_count_is_rejected() {
    let (model, store) = SdrFormer::init::<f32>(&tiny(3), 23).unwrap();
    let err = model.forward(&Session::eval(&store), &Var::constant(arr::<f32>(&[1, 2, 1, 2, 16, 16], 24))).unwrap_err();
    assert!(err.to_string().contains("2 phases"), "{err}");
}

#[test]
fn costs_scale_backbone_macs_with_phases_but_not_params() {
    let (m1, s1) = SdrFormer::init::<f32>(&tiny(1), 25).unwrap();
    let (m3, s3) = SdrFormer::init::<f32>(&tiny(3), 25).unwrap();
    let c1 = m1.costs([2, 16, 16]).unwrap();
    let c3 = m3.costs([2, 16, 16]).unwrap();
    assert_eq!(c1.iter().map(|c| c.params).sum::<usize>(), s1.num_trainable());
    assert_eq!(c3.iter().map(|c| c.params).sum::<usize>(), s3.num_trainable());
    assert_eq!(c3[0].macs, 3 * c1[0].macs);
    assert_eq!(c3[0].params, c1[0].params);
}

fn sample(id: &str, n: usize, seed: u64) -> MultiPhaseSample {
    let phases = (0..n)
        .map(|p| {
            let v = random_array(&[2, 4, 4], seed + p as u64).mapv(|x| x as f32);
            PhaseVolume::new(v.into_dimensionality::<ndarray::Ix3>().unwrap(), format!("phase{p}")).unwrap()
        })
        .collect();
    MultiPhaseSample {
        sample_id: id.into(),
        phases,
        label: 0,
        split: Split::Train,
        mask: None::<Array3<f32>>,
    }
}

#[test]
fn stacking_samples() {
    let (a, b) = (sample("a", 3, 1), sample("b", 3, 9));
    let x = stack_samples::<f32>(&[&a, &b]).unwrap();
    assert_eq!(x.shape(), &[2, 3, 1, 2, 4, 4]);
    assert_eq!(x[[1, 2, 0, 1, 3, 0]], b.phases[2].voxels[[1, 3, 0]]);
    assert!(stack_samples::<f32>(&[&a, &sample("c", 2, 3)]).is_err());
    assert!(stack_samples::<f32>(&[]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = SdrFormer::init::<f32>(&tiny(3), 26).unwrap();
    let ckpt = Checkpoint::from_store(&tiny(3), &store);
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, tiny(3));
    for (name, p) in store.iter() {
        let q = back.params.get(name).unwrap();
        assert_eq!(q.kind, p.kind);
        assert!(p.value.iter().zip(q.value.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = SdrFormer::init::<f32>(&tiny(3), 27).unwrap();
    let ckpt = Checkpoint::from_store(&tiny(3), &store);
    ckpt.save(dir.path()).unwrap();
    let blob = dir.path().join("params.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    let err = Checkpoint::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("corrupt"), "{err}");

    let mut missing = ckpt.clone();
    missing.params.remove("head.fc.bias");
    assert!(missing.check().is_err());
    let mut mismatched = ckpt.clone();
    mismatched.config = tiny(8);
    assert!(mismatched.check().is_err());
    std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

fn bits_equal(a: &ArrayD<f32>, b: &ArrayD<f32>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn three_to_eight_phases_copies_the_backbone() {
    let (_, store) = SdrFormer::init::<f32>(&tiny(3), 28).unwrap();
    let src = Checkpoint::from_store(&tiny(3), &store);
    let (dst, report) = adapt_phase_count(&src, 8, None, 29).unwrap();
    dst.check().unwrap();
    for (name, p) in src.params.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        assert!(bits_equal(&p.value, &dst.params.get(name).unwrap().value), "{name}");
        assert!(report.copied.contains(name));
    }
    let apsm: Vec<&String> = dst.params.names().filter(|n| n.contains(".apsm.")).collect();
    assert!(!apsm.is_empty());
    assert!(apsm.iter().all(|n| report.reinitialized.contains(n)));
    assert!(report.reinitialized.iter().any(|n| n == "fusion.high.w3.conv.weight"));
    assert!(report.copied.iter().any(|n| n == "head.fc.weight"));
    assert!(report.to_text().contains("reinit fusion.low.apsm.reduce.weight"));
    let (model, store8) = dst.instantiate::<f32>().unwrap();
    let logits = model.forward(&Session::eval(&store8), &Var::constant(arr::<f32>(&[1, 8, 1, 2, 16, 16], 30))).unwrap();
    assert_eq!(logits.shape(), &[1, 3]);
}

#[test]
fn same_phase_count_surgery_is_identity() {
    let (_, store) = SdrFormer::init::<f32>(&tiny(3), 31).unwrap();
    let src = Checkpoint::from_store(&tiny(3), &store);
    let (dst, report) = adapt_phase_count(&src, 3, None, 32).unwrap();
    assert!(report.reinitialized.is_empty() && report.dropped.is_empty());
    assert_eq!(src.params.len(), dst.params.len());
    for (name, p) in src.params.iter() {
        assert!(bits_equal(&p.value, &dst.params.get(name).unwrap().value), "{name}");
    }
}

#[test]
fn eight_to_three_phases_reshapes_fusion() {
    let (_, store) = SdrFormer::init::<f32>(&tiny(8), 33).unwrap();
    let (dst, report) = adapt_phase_count(&Checkpoint::from_store(&tiny(8), &store), 3, Some(4), 34).unwrap();
    assert_eq!(dst.params.value("fusion.high.apsm.reduce.weight").unwrap().shape(), &[8, 24, 1, 1, 1]);
    assert_eq!(dst.params.value("fusion.low.w3.conv.weight").unwrap().shape()[1], 24);
    assert!(report.dropped.iter().any(|n| n == "fusion.high.apsm.branch.7.weight"));
    assert!(report.reinitialized.iter().any(|n| n == "head.fc.weight"));
    assert_eq!(dst.config.num_classes, 4);
}

#[test]
fn incompatible_backbone_is_rejected() {
    let (_, store) = SdrFormer::init::<f32>(&tiny(3), 35).unwrap();
    let src = Checkpoint::from_store(&tiny(3), &store);
    let mut target = tiny(8);
    target.backbone.stage_channels = vec![4, 16];
    assert!(transfer(&src, &target, 0).unwrap_err().to_string().contains("incompatible backbone"));
    let target = SdrFormerConfig {
        bcim_enabled: false,
        ..tiny(3)
    };
    assert!(transfer(&src, &target, 0).is_err());
}

#[test]
fn config_serde_rejects_unknown_keys() {
    let json = serde_json::to_string(&SdrFormerConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<SdrFormerConfig>(&json).unwrap(), SdrFormerConfig::default());
    assert!(serde_json::from_str::<SdrFormerConfig>(&json.replace("n_phases", "phases")).is_err());
    let minimal: SdrFormerConfig = serde_json::from_str(r#"{"n_phases": 8, "num_classes": 7}"#).unwrap();
    assert!(minimal.apsm_enabled && minimal.bcim_enabled);
    assert!(SdrFormerConfig { n_phases: 0, ..tiny(1) }.validate().is_err());
    assert!(SdrFormerConfig { num_classes: 1, ..tiny(1) }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn softmax_normalization_on_random_inputs(n in prop::sample::select(vec![2usize, 3, 8]), seed in 0u64..1000, scale in 0.1f64..20.0) {
        let (store, f) = fusion::<f64>(n, 3, seed);
        let s = Session::eval(&store);
        let x = Var::constant(arr::<f64>(&[1, 3 * n, 1, 2, 2], seed + 1).mapv(|v| scale * v));
        let p = f.apsm.as_ref().unwrap().coefficients(&s, &x).unwrap();
        for j in 0..3 {
            let sum: f64 = (0..n).map(|k| p.value()[[0, k, j]]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
