use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::attention3d::AttentionVariant;
use crate::drformer::DrFormerConfig;
use crate::volforge::{synthesize_samples, SynthConfig};

fn schedule() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn lr_schedule_landmarks() {
    let c = schedule();
    assert!((lr_at(5.0, &c).unwrap() - 1e-4).abs() < 1e-15);
    assert!((lr_at(2.5, &c).unwrap() - 0.5e-4).abs() < 1e-15);
    assert_eq!(lr_at(0.0, &c).unwrap(), 0.0);
    assert!((lr_at(102.5, &c).unwrap() - 0.5e-4).abs() < 1e-12);
    assert!(lr_at(199.0, &c).unwrap() < 1e-8);
    assert!(lr_at(199.999, &c).unwrap() < 1e-12);
    assert!(lr_at(200.0, &c).is_err());
    assert!(lr_at(-0.1, &c).is_err());
}

#[test]
fn train_config_validation_and_serde() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { warmup_epochs: 200, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { crop: Some([20, 112, 112]), ..TrainConfig::default() }.validate().is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "warmup_epochs": 1}"#).unwrap();
    assert_eq!(c.base_lr, 1e-4);
    assert_eq!(c.weight_decay, 0.05);
    assert_eq!(c.batch_size, 8);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), ParamKind::Weight);
    store.insert("b", ArrayD::from_elem(IxDyn(&[1]), 1.0), ParamKind::NoDecay);
    store.insert("stat", ArrayD::from_elem(IxDyn(&[1]), 1.0), ParamKind::Buffer);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5f32, -2.0]).unwrap());
    grads.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[1]), 3.0f32));
    grads.insert("stat".to_string(), ArrayD::from_elem(IxDyn(&[1]), 3.0f32));
    let hyper = AdamWHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.05,
    };
    let mut opt = AdamW::new(hyper);
    let lr = 0.01;
    opt.update(&mut store, &grads, lr).unwrap();
    // First step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    let expect = |p: f64, g: f64, decay: bool| {
        let p = if decay { p * (1.0 - lr * 0.05) } else { p };
        p - lr * g / (g.abs() + 1e-8)
    };
    let w = store.value("w").unwrap();
    assert!((w[[0]] as f64 - expect(1.0, 0.5, true)).abs() < 1e-6);
    assert!((w[[1]] as f64 - expect(1.0, -2.0, true)).abs() < 1e-6);
    assert!((store.value("b").unwrap()[[0]] as f64 - expect(1.0, 3.0, false)).abs() < 1e-6);
    assert_eq!(store.value("stat").unwrap()[[0]], 1.0);
    assert_eq!(opt.step, 1);
}

fn onehot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| (0..k).map(|c| if c == l { 0.9 } else { 0.1 / (k - 1) as f64 }).collect())
        .collect()
}

#[test]
fn perfect_predictions_score_one() {
    let labels = vec![0, 1, 2, 1, 0, 2];
    let r = compute_metrics(&labels, &onehot(&labels, 3), 3).unwrap();
    assert_eq!((r.acc, r.f1, r.kappa), (1.0, 1.0, 1.0));
    assert_eq!(r.auc, Some(1.0));
    for (c, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
    }
}

/// Cohen's kappa written out from its definition for a 2x2 table.
fn kappa_2x2(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let n = tp + tn + fp + fn_;
    let po = (tp + tn) / n;
    let pe = ((tp + fn_) * (tp + fp) + (tn + fp) * (tn + fn_)) / (n * n);
    (po - pe) / (1.0 - pe)
}

#[test]
fn binary_hand_counts() {
    // TP = 2, TN = 1, FP = 1, FN = 0 with class 1 positive.
    let labels = vec![1, 1, 0, 0];
    let probs = vec![vec![0.2, 0.8], vec![0.3, 0.7], vec![0.9, 0.1], vec![0.4, 0.6]];
    let r = compute_metrics(&labels, &probs, 2).unwrap();
    assert_eq!(r.acc, 0.75);
    let oracle = kappa_2x2(2.0, 1.0, 1.0, 0.0);
    assert!((oracle - 0.5).abs() < 1e-12);
    assert!((r.kappa - oracle).abs() < 1e-12);
    assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
}

#[test]
fn separated_scores_give_unit_auc() {
    let scores = [0.9, 0.8, 0.4, 0.3];
    let pos = [true, true, false, false];
    assert_eq!(binary_auc(&scores, &pos), Some(1.0));
    let curve = roc_curve(1, &scores, &pos).unwrap();
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
}

#[test]
fn single_class_split_has_no_auc() {
    let labels = vec![1, 1, 1];
    let r = compute_metrics(&labels, &onehot(&labels, 2), 2).unwrap();
    assert_eq!(r.auc, None);
    assert!(r.roc.is_empty());
    assert!(compute_metrics(&[], &[], 2).is_err());
}

#[test]
fn independent_predictions_have_near_zero_kappa() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
    let probs: Vec<Vec<f64>> = (0..1000).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let r = compute_metrics(&labels, &probs, 3).unwrap();
    assert!(r.kappa.abs() < 0.1, "kappa {}", r.kappa);
    let scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
    let pos: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
    let auc = roc_curve(0, &scores, &pos).unwrap().trapezoid_auc();
    assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
}

/// Welch statistic and degrees of freedom from the textbook formulas.
fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let t = (ma - mb) / (va / na + vb / nb).sqrt();
    let df = (va / na + vb / nb).powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    (t, df)
}

/// Two-sided p-value by Simpson integration of the Student t density.
fn p_by_integration(t: f64, df: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let (a, b, n) = (0.0, t.abs(), 20_000);
    let h = (b - a) / n as f64;
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

#[test]
fn welch_t_test() {
    let a = [2.1, 2.5, 2.3, 2.2];
    let b = [2.8, 3.0, 2.9, 3.1];
    let r = t_test_independent(&a, &b).unwrap();
    let (t, df) = welch_oracle(&a, &b);
    assert!((r.t - t).abs() < 1e-6);
    assert!((r.df - df).abs() < 1e-9);
    assert!((r.p_two_sided - p_by_integration(t, df)).abs() < 1e-6);
    assert!((r.p_greater - (1.0 - r.p_two_sided / 2.0)).abs() < 1e-12);

    let same = t_test_independent(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((same.t, same.p_two_sided), (0.0, 1.0));
    let far = t_test_independent(&[11.0, 12.0, 13.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!(far.p_two_sided < 0.01 && far.p_greater < 0.01);
    assert!(t_test_independent(&[1.0], &[1.0, 2.0]).is_err());
}

fn tiny_model(n: usize, k: usize) -> SdrFormerConfig {
    SdrFormerConfig {
        backbone: DrFormerConfig::tiny(vec![4, 8], 1, AttentionVariant::Gsa { grid: [2, 2, 2] }),
        n_phases: n,
        num_classes: k,
        ..SdrFormerConfig::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 2e-3,
        epochs,
        warmup_epochs: 0,
        batch_size: 8,
        resize: None,
        crop: Some([2, 16, 16]),
        ..TrainConfig::default()
    }
}

fn synth(n: usize, phases: usize, k: usize, fractions: [f64; 3], seed: u64) -> Dataset {
    let cfg = SynthConfig {
        split_fractions: fractions,
        ..SynthConfig::new(n, phases, k, [3, 20, 20], 1.5, 0.2, seed)
    };
    Dataset::in_memory(cfg.class_names(), cfg.phase_names(), synthesize_samples(&cfg).unwrap()).unwrap()
}

#[test]
fn one_batch_epoch_takes_one_step_and_starts_near_ln_k() {
    let data = synth(8, 2, 3, [1.0, 0.0, 0.0], 1);
    assert_eq!(data.indices(Split::Train).len(), 8);
    let out = fit(&tiny_model(2, 3), &data, &quick(1), &FitOptions::default()).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].steps, 1);
    let ln_k = 3f64.ln();
    assert!((out.initial_loss - ln_k).abs() < 0.2 * ln_k, "initial loss {}", out.initial_loss);
}

#[test]
fn shuffled_labels_do_not_leak() {
    let data = synth(160, 2, 2, [0.5, 0.5, 0.0], 2);
    let mut samples: Vec<_> = (0..data.len()).map(|i| data.get(i).unwrap()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for s in &mut samples {
        s.label = rng.random_range(0..2);
    }
    let shuffled = Dataset::in_memory(data.manifest.class_names.clone(), data.phase_names(), samples).unwrap();
    let out = fit(&tiny_model(2, 2), &shuffled, &quick(3), &FitOptions::default()).unwrap();
    let (model, store) = out.best.instantiate::<f32>().unwrap();
    let acc = evaluate(&model, &store, &shuffled, Split::Val, &quick(3)).unwrap().report.acc;
    assert!((acc - 0.5).abs() <= 0.15, "val acc {acc}");
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let data = synth(24, 2, 2, [0.67, 0.33, 0.0], 3);
    let cfg = quick(3);
    let model_cfg = tiny_model(2, 2);
    let full_dir = tempfile::tempdir().unwrap();
    let full = fit(
        &model_cfg,
        &data,
        &cfg,
        &FitOptions {
            out_dir: Some(full_dir.path().into()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let part = FitOptions {
        out_dir: Some(dir.path().into()),
        resume: true,
        stop_after: Some(1),
        ..FitOptions::default()
    };
    assert_eq!(fit(&model_cfg, &data, &cfg, &part).unwrap().log.len(), 1);
    let rest = fit(
        &model_cfg,
        &data,
        &cfg,
        &FitOptions {
            stop_after: None,
            ..part
        },
    )
    .unwrap();
    assert_eq!(rest.log.len(), 2);
    for (a, b) in full.log[1..].iter().zip(&rest.log) {
        let (va, vb) = (a.val.unwrap(), b.val.unwrap());
        assert!((va.acc - vb.acc).abs() < 1e-4 && (va.kappa - vb.kappa).abs() < 1e-4);
        assert!((a.train_loss - b.train_loss).abs() < 1e-4);
    }
    let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(dir.path().join("best/manifest.json").exists());
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let data = synth(8, 2, 2, [1.0, 0.0, 0.0], 4);
    let model_cfg = tiny_model(2, 2);
    let (_, mut store) = SdrFormer::init::<f32>(&model_cfg, 0).unwrap();
    store.set_value("head.fc.bias", ArrayD::from_elem(IxDyn(&[2]), f32::NAN)).unwrap();
    let opts = FitOptions {
        init: Some(Checkpoint::from_store(&model_cfg, &store)),
        ..FitOptions::default()
    };
    match fit(&model_cfg, &data, &quick(1), &opts) {
        Err(Error::Diverged { epoch: 0, step: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn phase_count_mismatch_is_reported() {
    let data = synth(8, 3, 2, [1.0, 0.0, 0.0], 5);
    let err = fit(&tiny_model(2, 2), &data, &quick(1), &FitOptions::default()).unwrap_err();
    assert!(err.to_string().contains("phase-count mismatch"), "{err}");
}

#[test]
fn preparation_crops_and_normalizes() {
    let data = synth(4, 2, 2, [1.0, 0.0, 0.0], 6);
    let s = data.get(0).unwrap();
    let cfg = TrainConfig {
        resize: Some([4, 24, 24]),
        crop: Some([2, 16, 16]),
        ..TrainConfig::default()
    };
    let eval = prepare_sample(&s, &cfg, false, 0).unwrap();
    assert_eq!(eval.dims(), [2, 16, 16]);
    assert_eq!(eval.phases, prepare_sample(&s, &cfg, false, 7).unwrap().phases);
    let train = prepare_sample(&s, &cfg, true, 1).unwrap();
    assert_eq!(train.dims(), [2, 16, 16]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_order_invariant(seed in 0u64..10_000, n in 4usize..40) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect()).collect();
        let a = compute_metrics(&labels, &probs, 3).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let p2: Vec<Vec<f64>> = perm.iter().map(|&i| probs[i].clone()).collect();
        let b = compute_metrics(&l2, &p2, 3).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert!((a.kappa - b.kappa).abs() < 1e-12 && (a.f1 - b.f1).abs() < 1e-12);
        prop_assert_eq!(a.auc.map(|v| (v * 1e9).round()), b.auc.map(|v| (v * 1e9).round()));
    }

    #[test]
    fn roc_is_monotone_and_matches_rank_auc(seed in 0u64..10_000, n in 2usize..60) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..7) as f64) / 6.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let curve = roc_curve(0, &scores, &pos).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let first = curve.points[0];
        let last = *curve.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
        prop_assert!((curve.trapezoid_auc() - binary_auc(&scores, &pos).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn kappa_is_one_exactly_for_diagonal_tables(d in prop::collection::vec(0usize..6, 3), off in 0usize..3) {
        let mut table = vec![vec![0usize; 3]; 3];
        for i in 0..3 {
            table[i][i] = d[i];
        }
        let classes = d.iter().filter(|&&v| v > 0).count();
        if off > 0 {
            table[0][off] += 1;
        }
        let k = cohen_kappa(&table);
        let diagonal = off == 0;
        prop_assert_eq!((k - 1.0).abs() < 1e-12, diagonal && classes >= 2);
    }
}
