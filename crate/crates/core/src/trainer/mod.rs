//! Training loop, schedule, evaluation metrics and statistical comparison.

mod metrics;
mod optim;
#[cfg(test)]
mod tests;

pub use metrics::{
    binary_auc, cohen_kappa, compute_metrics, roc_curve, t_test_independent, ClassMetrics, MetricsReport,
    MetricsSummary, RocCurve, RocPoint, TTestResult,
};
pub use optim::{AdamW, AdamWHyper};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy, softmax_last, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{ParamKind, ParamStore, Session};
use crate::sdrformer::{
    collect_records, read_tensors, stack_samples, write_tensors, Checkpoint, PhaseAttentionRecord, SdrFormer,
    SdrFormerConfig, TensorEntry,
};
use crate::volforge::{
    augment_sample, crop_sample, resize_sample, sub_seed, AugmentationConfig, CropMode, Dataset, MultiPhaseSample,
    Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Every volume is resampled to this size first, when set.
    pub resize: Option<[usize; 3]>,
    /// Random crop in training, center crop in evaluation, when set.
    pub crop: Option<[usize; 3]>,
    pub augmentation: AugmentationConfig,
    /// Per-phase z-scoring after resizing.
    pub normalize: bool,
    /// Momentum of the batch-norm running statistics.
    pub bn_momentum: f64,
    /// Stop when val accuracy has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.05,
            epochs: 200,
            warmup_epochs: 5,
            batch_size: 8,
            eval_batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            resize: Some([16, 128, 128]),
            crop: Some([14, 112, 112]),
            augmentation: AugmentationConfig::default(),
            normalize: true,
            bn_momentum: 0.1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err!("batch sizes must be >= 1"));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("invalid optimizer hyperparameters"));
        }
        if let (Some(r), Some(c)) = (self.resize, self.crop) {
            if (0..3).any(|a| c[a] > r[a]) {
                return Err(config_err!("crop {c:?} exceeds resize target {r:?}"));
            }
        }
        self.augmentation.validate()
    }

    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Spatial size of the network input for volumes of `dims`.
    pub fn input_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.crop.or(self.resize).unwrap_or(dims)
    }
}

/// Learning rate at fractional epoch `e`: linear warmup from 0, then cosine to 0.
pub fn lr_at(e: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(0.0..total).contains(&e) {
        return Err(config_err!("epoch {e} outside [0, {total})"));
    }
    let w = cfg.warmup_epochs as f64;
    Ok(if e < w {
        cfg.base_lr * e / w
    } else {
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (e - w) / (total - w)).cos())
    })
}

/// Resize, normalize, then crop and (training only) augment.
pub fn prepare_sample(s: &MultiPhaseSample, cfg: &TrainConfig, train: bool, seed: u64) -> Result<MultiPhaseSample> {
    let mut s = match cfg.resize {
        Some(r) if r != s.dims() => resize_sample(s, r)?,
        _ => s.clone(),
    };
    if cfg.normalize {
        s = s.normalized();
    }
    if let Some(c) = cfg.crop {
        let mode = if train { CropMode::Random } else { CropMode::Center };
        s = crop_sample(&s, c, mode, seed)?;
    }
    if train {
        s = augment_sample(&s, &cfg.augmentation, sub_seed(seed, 1));
    }
    Ok(s)
}

/// Model outputs over a set of samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub records: Vec<PhaseAttentionRecord>,
}

/// Class probabilities for the given dataset indices, evaluation preprocessing.
pub fn predict(
    model: &SdrFormer,
    store: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<f64>>, Vec<PhaseAttentionRecord>)> {
    let mut probs = Vec::with_capacity(indices.len());
    let mut records = Vec::new();
    for chunk in indices.chunks(cfg.eval_batch_size) {
        let samples = chunk
            .iter()
            .map(|&i| prepare_sample(&data.get(i)?, cfg, false, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MultiPhaseSample> = samples.iter().collect();
        let s = Session::eval(store);
        let logits = model.forward(&s, &Var::constant(stack_samples::<f32>(&refs)?))?;
        let p = softmax_last(&logits);
        probs.extend(p.value().rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
        records.extend(collect_records(&s, &ids)?);
    }
    Ok((probs, records))
}

/// Metrics on one split.
pub fn evaluate(model: &SdrFormer, store: &ParamStore<f32>, data: &Dataset, split: Split, cfg: &TrainConfig) -> Result<Evaluation> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Metric(format!("empty {split} split")));
    }
    let (probs, records) = predict(model, store, data, &idx, cfg)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let report = compute_metrics(&labels, &probs, model.cfg.num_classes)?;
    let sample_ids = idx
        .iter()
        .map(|&i| data.manifest.samples[i].sample_id.clone())
        .collect();
    Ok(Evaluation {
        report,
        sample_ids,
        labels,
        probs,
        records,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub steps: usize,
    pub val: Option<MetricsSummary>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub acc: f64,
    pub auc: Option<f64>,
}

impl BestRecord {
    /// Higher accuracy wins, ties go to higher AUC.
    fn beats(&self, other: &BestRecord) -> bool {
        let auc = |a: Option<f64>| a.unwrap_or(f64::NEG_INFINITY);
        self.acc > other.acc || (self.acc == other.acc && auc(self.auc) > auc(other.auc))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where logs, `best/` and `last/` are written. Nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last` when present.
    pub resume: bool,
    /// Return after this many completed epochs (the schedule still spans `epochs`).
    pub stop_after: Option<usize>,
    /// Starting parameters, e.g. after phase-count surgery.
    pub init: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: SdrFormer,
    pub best: Checkpoint,
    pub best_record: Option<BestRecord>,
    pub last: ParamStore<f32>,
    pub log: Vec<EpochRecord>,
    pub steps: u64,
    /// Mean cross-entropy of the first batch before any update.
    pub initial_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    next_epoch: usize,
    adam_step: u64,
    best: Option<BestRecord>,
    train: TrainConfig,
    moments: Vec<TensorEntry>,
}

const LOG_FILE: &str = "train_log.jsonl";

fn save_last(dir: &Path, cfg: &SdrFormerConfig, store: &ParamStore<f32>, opt: &AdamW, state: (usize, Option<BestRecord>), train: &TrainConfig) -> Result<()> {
    let last = dir.join("last");
    Checkpoint::from_store(cfg, store).save(&last)?;
    let tensors: Vec<(String, &ArrayD<f32>)> = opt
        .m
        .iter()
        .map(|(k, v)| (format!("m:{k}"), v))
        .chain(opt.v.iter().map(|(k, v)| (format!("v:{k}"), v)))
        .collect();
    let moments = write_tensors(&last, "optimizer.bin", tensors.iter().map(|(k, v)| (k.as_str(), *v, ParamKind::Buffer)))?;
    let st = TrainerState {
        next_epoch: state.0,
        adam_step: opt.step,
        best: state.1,
        train: train.clone(),
        moments,
    };
    let path = last.join("trainer_state.json");
    fs::write(&path, serde_json::to_string_pretty(&st)?).map_err(|e| Error::io(&path, e))
}

fn load_last(dir: &Path, hyper: AdamWHyper) -> Result<(Checkpoint, AdamW, TrainerState)> {
    let last = dir.join("last");
    let ckpt = Checkpoint::load(&last)?;
    let path = last.join("trainer_state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let st: TrainerState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
    let mut opt = AdamW::new(hyper);
    opt.step = st.adam_step;
    for (name, (value, _)) in read_tensors(&last, &st.moments)? {
        match name.split_once(':') {
            Some(("m", k)) => opt.m.insert(k.to_string(), value),
            Some(("v", k)) => opt.v.insert(k.to_string(), value),
            _ => return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{name}`"))),
        };
    }
    Ok((ckpt, opt, st))
}

fn append_log(dir: &Path, rec: &EpochRecord) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trains on the `train` split, selecting the best epoch on `val`.
///
/// Epoch order and augmentation are functions of `(seed, epoch, sample)`, so a
/// resumed run replays exactly what an uninterrupted run would have done.
pub fn fit(model_cfg: &SdrFormerConfig, data: &Dataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.num_phases() != model_cfg.n_phases {
        return Err(config_err!(
            "phase-count mismatch: model expects {} phases, dataset provides {} ({:?})",
            model_cfg.n_phases,
            data.num_phases(),
            data.phase_names()
        ));
    }
    if data.num_classes() != model_cfg.num_classes {
        return Err(config_err!(
            "class-count mismatch: model has {} classes, dataset {}",
            model_cfg.num_classes,
            data.num_classes()
        ));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let val_idx = data.indices(Split::Val);

    let (model, mut store) = SdrFormer::init::<f32>(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw());
    let mut start = 0;
    let mut best_record: Option<BestRecord> = None;
    if let Some(init) = &opts.init {
        if init.config != *model_cfg {
            return Err(config_err!("initial checkpoint config differs from the model config"));
        }
        init.check()?;
        store = init.params.clone();
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if opts.resume && dir.join("last").join("trainer_state.json").exists() {
            let (ckpt, o, st) = load_last(dir, cfg.adamw())?;
            if ckpt.config != *model_cfg || st.train != *cfg {
                return Err(config_err!("resume state in {} was written with a different config", dir.display()));
            }
            store = ckpt.params;
            opt = o;
            start = st.next_epoch;
            best_record = st.best;
        } else if dir.join(LOG_FILE).exists() {
            fs::remove_file(dir.join(LOG_FILE)).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
        }
    }
    let mut best = match opts.out_dir.as_ref().map(|d| d.join("best")) {
        Some(p) if best_record.is_some() && p.exists() => Checkpoint::load(&p)?,
        _ => Checkpoint::from_store(model_cfg, &store),
    };

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut since_best = 0usize;
    let end = opts.stop_after.map_or(cfg.epochs, |k| (start + k).min(cfg.epochs));
    for epoch in start..end {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, epoch as u64)));
        let aug_seed = sub_seed(cfg.seed ^ 0x5EED_A06, epoch as u64);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| prepare_sample(&data.get(i)?, cfg, true, sub_seed(aug_seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MultiPhaseSample> = samples.iter().collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let x = Var::constant(stack_samples::<f32>(&refs)?);
            lr = lr_at(epoch as f64 + (step as f64 + 0.5) / steps_per_epoch as f64, cfg)?;
            let s = Session::train(&store);
            let loss = cross_entropy(&model.forward(&s, &x)?, &labels)?;
            let lv = loss.value().iter().next().copied().unwrap_or(f32::NAN) as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            if initial_loss.is_nan() {
                initial_loss = lv;
            }
            loss_sum += lv * chunk.len() as f64;
            let grads = s.param_grads(&loss.backward());
            if grads.values().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            let updates = s.into_updates();
            opt.update(&mut store, &grads, lr)?;
            store.apply_norm_updates(&updates, cfg.bn_momentum)?;
        }
        let val = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(&model, &store, data, Split::Val, cfg)?.report)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            steps: steps_per_epoch,
            val: val.as_ref().map(MetricsReport::summary),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} lr {lr:.2e} val acc {}",
            rec.train_loss,
            val.as_ref().map_or("-".into(), |v| format!("{:.4}", v.acc))
        );
        let candidate = BestRecord {
            epoch,
            acc: val.as_ref().map_or(0.0, |v| v.acc),
            auc: val.as_ref().and_then(|v| v.auc),
        };
        // Without a val split the latest epoch is kept.
        let improved = val.is_none() || best_record.is_none_or(|b| candidate.beats(&b));
        if improved {
            best_record = Some(candidate);
            best = Checkpoint::from_store(model_cfg, &store);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(dir) = &opts.out_dir {
            append_log(dir, &rec)?;
            if improved {
                best.save(&dir.join("best"))?;
            }
            save_last(dir, model_cfg, &store, &opt, (epoch + 1, best_record), cfg)?;
        }
        log.push(rec);
        if cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(FitOutcome {
        model,
        best,
        best_record,
        last: store,
        log,
        steps: opt.step,
        initial_loss,
    })
}
