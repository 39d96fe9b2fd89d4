use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use image::GrayImage;
use serde::Serialize;

use sdrformer::analysis::{self, CoefficientOutcome};
use sdrformer::nn::{ParamStore, Stream};
use sdrformer::sdrformer::{adapt_phase_count, Checkpoint, SdrFormer, SdrFormerConfig};
use sdrformer::trainer::{evaluate, fit, prepare_sample, Evaluation, FitOptions, MetricsReport, TrainConfig};
use sdrformer::volforge::{generate_synthetic_dataset, write_volume, Dataset, PhaseVolume, SignalLayout, Split, SynthConfig};

use crate::config::RunConfig;
use crate::{
    AblateArgs, CoeffsArgs, EvalArgs, GradcamArgs, LayoutArg, ProfileArgs, RocArgs, SplitArg, StreamArg, SynthArgs, TrainArgs,
    TransferArgs,
};

/// Invalid invocation detected after parsing; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

const TRAIN_CONFIG: &str = "train_config.json";

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn open_data(path: &Path) -> Result<Dataset> {
    let mut d = Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    d.preload()?;
    Ok(d)
}

fn data_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set `data` in the config"))
}

/// Preprocessing saved next to the checkpoint, else from `--config`, else defaults.
fn train_config_for(checkpoint: &Path, config: Option<&Path>) -> Result<TrainConfig> {
    let saved = checkpoint.join(TRAIN_CONFIG);
    if let Some(c) = config {
        return Ok(RunConfig::load(c)?.train);
    }
    if saved.exists() {
        let text = fs::read_to_string(&saved)?;
        return Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", saved.display()))?);
    }
    Ok(TrainConfig::default())
}

fn load_model(checkpoint: &Path) -> Result<(SdrFormer, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(ckpt.instantiate::<f32>()?)
}

/// The requested split, or validation when it is empty.
fn report_split(data: &Dataset, preferred: Split) -> Split {
    if !data.indices(preferred).is_empty() {
        preferred
    } else if !data.indices(Split::Val).is_empty() {
        Split::Val
    } else {
        Split::Train
    }
}

fn print_summary(label: &str, e: &Evaluation) {
    let r = &e.report;
    println!(
        "{label}: n={} acc={:.4} auc={} f1={:.4} kappa={:.4}",
        r.n,
        r.acc,
        r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        r.f1,
        r.kappa
    );
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.n, a.phases, a.classes, a.dims, a.contrast, a.noise, a.seed);
    cfg.layout = match a.layout {
        LayoutArg::Distributed => SignalLayout::Distributed,
        LayoutArg::Split => SignalLayout::Split,
        LayoutArg::SinglePhase => SignalLayout::SinglePhase { phase: a.signal_phase },
    };
    if let Some(f) = a.fractions {
        cfg.split_fractions = [f[0], f[1], f[2]];
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (manifest, path) = generate_synthetic_dataset(&cfg, &a.out)?;
    log::info!("{} samples, {} phases", manifest.samples.len(), manifest.phase_names.len());
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    split: String,
    best_epoch: Option<usize>,
    epochs_run: usize,
    steps: u64,
    report: MetricsReport,
}

fn finish_training(out: &Path, cfg: &TrainConfig, data: &Dataset, outcome: &sdrformer::trainer::FitOutcome) -> Result<()> {
    for sub in ["best", "last"] {
        if out.join(sub).exists() {
            write_json(&out.join(sub).join(TRAIN_CONFIG), cfg)?;
        }
    }
    let (model, store) = outcome.best.instantiate::<f32>()?;
    let split = report_split(data, Split::Test);
    if split != Split::Test {
        log::warn!("test split is empty; reporting on {split}");
    }
    let e = evaluate(&model, &store, data, split, cfg)?;
    print_summary(&split.to_string(), &e);
    write_json(
        &out.join("report.json"),
        &TrainSummary {
            split: split.to_string(),
            best_epoch: outcome.best_record.as_ref().map(|b| b.epoch),
            epochs_run: outcome.log.len(),
            steps: outcome.steps,
            report: e.report.clone(),
        },
    )?;
    if !e.report.roc.is_empty() {
        analysis::roc_export(&e.report, out.join("roc.csv"))?;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::load(&a.config)?;
    rc.train.seed = rc.resolve_seed(a.seed)?;
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
        rc.train.validate().map_err(|e| usage(e.to_string()))?;
    }
    let data = open_data(&data_path(a.data, &rc)?)?;
    let out = a
        .out
        .or_else(|| rc.out_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set `out_dir`"))?;
    write_json(&out.join("run_config.json"), &rc)?;
    let outcome = fit(
        &rc.model,
        &data,
        &rc.train,
        &FitOptions {
            out_dir: Some(out.clone()),
            resume: a.resume,
            ..FitOptions::default()
        },
    )?;
    if let Some(r) = outcome.log.first() {
        println!("epoch 0 train_loss {:.9}", r.train_loss);
    }
    finish_training(&out, &rc.train, &data, &outcome)?;
    println!("{}", out.join("best").display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = train_config_for(&a.checkpoint, a.config.as_deref())?;
    let (model, store) = load_model(&a.checkpoint)?;
    let mut data = open_data(&a.data)?;
    if let Some(names) = &a.phases {
        data = data.with_phase_subset(names).map_err(|e| usage(e.to_string()))?;
    }
    if data.num_phases() != model.cfg.n_phases {
        bail!(
            "phase-count mismatch: checkpoint expects {} phases, data provides {}",
            model.cfg.n_phases,
            data.num_phases()
        );
    }
    let split = split_of(a.split);
    let e = evaluate(&model, &store, &data, split, &cfg)?;
    print_summary(&split.to_string(), &e);
    if model.cfg.n_phases == 1 {
        println!("note: single phase, APSM bypassed");
    }
    if let Some(out) = a.out {
        write_json(&out.join("report.json"), &e.report)?;
        if !e.report.roc.is_empty() {
            analysis::roc_export(&e.report, out.join("roc.csv"))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct AblationRun {
    subset: Vec<String>,
    variant: &'static str,
    bcim: bool,
    apsm: bool,
    seed: u64,
}

#[derive(Clone, Debug, Serialize)]
struct AblationRow {
    subset: Vec<String>,
    variant: String,
    bcim: bool,
    apsm: bool,
    seed: u64,
    split: String,
    acc: f64,
    auc: Option<f64>,
    f1: f64,
    kappa: f64,
    params: usize,
    flops_g: f64,
    notes: Vec<String>,
}

fn run_ablation(rc: &RunConfig, data: &Dataset, run: &AblationRun, dims: [usize; 3], out: &Path) -> Result<AblationRow> {
    let data = data.with_phase_subset(&run.subset)?;
    let model_cfg = SdrFormerConfig {
        bcim_enabled: run.bcim,
        apsm_enabled: run.apsm,
        ..rc.model.with_phases(run.subset.len())
    };
    let mut train_cfg = rc.train.clone();
    train_cfg.seed = run.seed;
    let tag = format!("{}_{}_seed{}", run.subset.join("+"), run.variant, run.seed);
    let outcome = fit(
        &model_cfg,
        &data,
        &train_cfg,
        &FitOptions {
            out_dir: Some(out.join(&tag)),
            ..FitOptions::default()
        },
    )?;
    let (model, store) = outcome.best.instantiate::<f32>()?;
    let split = report_split(&data, Split::Test);
    let e = evaluate(&model, &store, &data, split, &train_cfg)?;
    let prof = analysis::profile(&model_cfg, dims)?;
    let mut notes = Vec::new();
    if run.subset.len() == 1 {
        notes.push("APSM bypassed (single phase)".to_string());
    }
    log::info!("{tag}: acc {:.4}", e.report.acc);
    Ok(AblationRow {
        subset: run.subset.clone(),
        variant: run.variant.to_string(),
        bcim: run.bcim,
        apsm: run.apsm,
        seed: run.seed,
        split: split.to_string(),
        acc: e.report.acc,
        auc: e.report.auc,
        f1: e.report.f1,
        kappa: e.report.kappa,
        params: prof.params,
        flops_g: prof.flops_g,
        notes,
    })
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let rc = RunConfig::load(&a.config)?;
    let data = open_data(&data_path(a.data, &rc)?)?;
    let all = data.phase_names();
    let subsets: Vec<Vec<String>> = if a.subsets.is_empty() {
        vec![all.clone()]
    } else {
        a.subsets
            .iter()
            .map(|s| s.split(',').map(|p| p.trim().to_string()).collect())
            .collect()
    };
    for s in &subsets {
        if let Some(bad) = s.iter().find(|p| !all.contains(p)) {
            return Err(usage(format!("phase `{bad}` not in manifest phases {all:?}")));
        }
    }
    let variants: Vec<(&'static str, bool, bool)> = if a.grid {
        vec![("baseline", false, false), ("bcim", true, false), ("apsm", false, true), ("full", true, true)]
    } else {
        let (b, p) = (!a.no_bcim, !a.no_apsm);
        let name = match (b, p) {
            (false, false) => "baseline",
            (true, false) => "bcim",
            (false, true) => "apsm",
            (true, true) => "full",
        };
        vec![(name, b, p)]
    };
    let seeds = match a.seeds {
        Some(s) => s,
        None => vec![rc.resolve_seed(None)?],
    };
    let mut runs = Vec::new();
    for s in &subsets {
        for &(variant, bcim, apsm) in &variants {
            for &seed in &seeds {
                runs.push(AblationRun {
                    subset: s.clone(),
                    variant,
                    bcim,
                    apsm,
                    seed,
                });
            }
        }
    }
    let dims = rc.train.input_dims(data.get(0)?.dims());
    fs::create_dir_all(&a.out)?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let row = run_ablation(&rc, &data, run, dims, &a.out);
                rows.lock().expect("no poisoned workers")[i] = Some(row);
            });
        }
    });
    let rows: Vec<AblationRow> = rows
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect::<Result<_>>()?;
    for r in &rows {
        println!(
            "{:<24} {:<8} seed {:<4} acc {:.4} params {:>9}{}",
            r.subset.join(","),
            r.variant,
            r.seed,
            r.acc,
            r.params,
            if r.notes.is_empty() { String::new() } else { format!("  [{}]", r.notes.join("; ")) }
        );
    }
    write_json(&a.out.join("ablation.json"), &rows)
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let mut rc = RunConfig::load(&a.config)?;
    rc.train.seed = rc.resolve_seed(a.seed)?;
    let src = Checkpoint::load(&a.from).with_context(|| format!("loading checkpoint {}", a.from.display()))?;
    let (init, report) = adapt_phase_count(&src, a.phases, a.classes, rc.train.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("surgery_report.txt"), report.to_text())?;
    init.save(&a.out.join("init"))?;
    println!(
        "surgery: {} copied, {} reinitialized, {} dropped",
        report.copied.len(),
        report.reinitialized.len(),
        report.dropped.len()
    );
    let data = open_data(&data_path(a.data, &rc)?)?;
    let model_cfg = init.config.clone();
    write_json(
        &a.out.join("run_config.json"),
        &RunConfig {
            model: model_cfg.clone(),
            ..rc.clone()
        },
    )?;
    let outcome = fit(
        &model_cfg,
        &data,
        &rc.train,
        &FitOptions {
            out_dir: Some(a.out.clone()),
            init: Some(init),
            ..FitOptions::default()
        },
    )?;
    finish_training(&a.out, &rc.train, &data, &outcome)?;
    println!("{}", a.out.join("best").display());
    Ok(())
}

pub fn profile(a: ProfileArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?.model;
    if let Some(n) = a.phases {
        cfg = cfg.with_phases(n);
    }
    cfg.bcim_enabled &= !a.no_bcim;
    cfg.apsm_enabled &= !a.no_apsm;
    let report = analysis::profile(&cfg, a.dims).map_err(|e| usage(e.to_string()))?;
    print!("{}", report.to_text());
    if let Some(p) = a.json {
        write_json(&p, &report)?;
    }
    Ok(())
}

fn pick_samples(data: &Dataset, sample: Option<&str>, split: Split) -> Result<Vec<usize>> {
    match sample {
        Some(key) => {
            let by_id = data.manifest.samples.iter().position(|e| e.sample_id == key);
            match by_id.or_else(|| key.parse::<usize>().ok().filter(|&i| i < data.len())) {
                Some(i) => Ok(vec![i]),
                None => Err(usage(format!("no sample `{key}`"))),
            }
        }
        None => {
            let idx = data.indices(split);
            if idx.is_empty() {
                Err(usage(format!("the {split} split is empty")))
            } else {
                Ok(idx)
            }
        }
    }
}

fn save_slice_png(heat: &ndarray::Array3<f32>, path: &Path) -> Result<()> {
    let mid = heat.shape()[0] / 2;
    let sl = heat.index_axis(ndarray::Axis(0), mid);
    let (h, w) = (sl.shape()[0] as u32, sl.shape()[1] as u32);
    let img = GrayImage::from_fn(w, h, |x, y| image::Luma([(sl[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8]));
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn gradcam(a: GradcamArgs) -> Result<()> {
    let cfg = train_config_for(&a.checkpoint, a.config.as_deref())?;
    let (model, store) = load_model(&a.checkpoint)?;
    let data = open_data(&a.data)?;
    let i = pick_samples(&data, a.sample.as_deref(), split_of(a.split))?[0];
    let sample = prepare_sample(&data.get(i)?, &cfg, false, 0)?;
    let stream = match a.stream {
        StreamArg::High => Stream::High,
        StreamArg::Low => Stream::Low,
    };
    let stage = a.stage.unwrap_or(model.cfg.backbone.num_stages());
    let target = a.class.unwrap_or(sample.label);
    let maps = analysis::gradcam3d(&model, &store, &sample, target, stream, stage).map_err(|e| match e {
        sdrformer::Error::Config(m) => usage(m),
        e => e.into(),
    })?;
    fs::create_dir_all(&a.out)?;
    let tag = format!("{}_{:?}_stage{stage}_class{target}", sample.sample_id, a.stream).to_lowercase();
    for m in &maps {
        let name = &sample.phases[m.phase].phase_name;
        let path = a.out.join(format!("{tag}_{name}.vvol"));
        write_volume(&path, &PhaseVolume::new(m.heat.clone(), name.clone())?)?;
        save_slice_png(&m.heat, &a.out.join(format!("{tag}_{name}.png")))?;
        println!("{}", path.display());
    }
    if a.occlusion {
        let mut occ = analysis::occlusion_sensitivity(&model, &store, &sample, target, 8, 8)?;
        let combined = maps.iter().fold(ndarray::Array3::<f32>::zeros(sample.dims()), |acc, m| acc + &m.heat);
        let iou = analysis::top_fraction_iou(&combined, &occ, 0.1)?;
        println!("occlusion top-10% IoU {iou:.4}");
        if let Some(mask) = &sample.mask {
            if let Some(r) = analysis::mask_heat_ratio(&combined, mask) {
                println!("lesion/background mean heat ratio {r:.4}");
            }
        }
        occ.mapv_inplace(|v| v.max(0.0));
        analysis::max_normalize(&mut occ);
        write_volume(a.out.join(format!("{tag}_occlusion.vvol")), &PhaseVolume::new(occ, "occlusion")?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CoefficientSummary {
    phase_names: Vec<String>,
    samples: usize,
    /// Per stream: fraction of samples whose largest mean coefficient is each phase.
    argmax_fraction: Vec<(Stream, Vec<f64>)>,
}

pub fn coeffs(a: CoeffsArgs) -> Result<()> {
    let cfg = train_config_for(&a.checkpoint, a.config.as_deref())?;
    let (model, store) = load_model(&a.checkpoint)?;
    let data = open_data(&a.data)?;
    let idx = pick_samples(&data, a.sample.as_deref(), split_of(a.split))?;
    let mut counts: Vec<(Stream, Vec<f64>)> = Vec::new();
    let mut n = 0;
    for &i in &idx {
        let sample = prepare_sample(&data.get(i)?, &cfg, false, 0)?;
        match analysis::export_phase_coefficients(&model, &store, &sample, &a.out)? {
            CoefficientOutcome::NotApplicable(why) => {
                println!("not applicable: {why}");
                return Ok(());
            }
            CoefficientOutcome::Exported(_) => {}
        }
        n += 1;
        for r in analysis::phase_coefficients(&model, &store, &sample)? {
            let means = r.phase_means();
            let best = (0..means.len()).fold(0, |b, k| if means[k] > means[b] { k } else { b });
            let slot = match counts.iter_mut().find(|(s, _)| *s == r.stream) {
                Some(c) => c,
                None => {
                    counts.push((r.stream, vec![0.0; means.len()]));
                    counts.last_mut().expect("just pushed")
                }
            };
            slot.1[best] += 1.0;
        }
    }
    for (_, c) in &mut counts {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    for (s, c) in &counts {
        println!("{s:?}: argmax fraction per phase {c:?}");
    }
    write_json(
        &a.out.join("summary.json"),
        &CoefficientSummary {
            phase_names: data.phase_names(),
            samples: n,
            argmax_fraction: counts,
        },
    )
}

pub fn roc(a: RocArgs) -> Result<()> {
    let report: MetricsReport = match (&a.report, &a.checkpoint, &a.data) {
        (Some(p), _, _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            // Accept both a bare report and the training summary wrapping one.
            serde_json::from_value(v.get("report").cloned().unwrap_or(v)).context("parsing metrics report")?
        }
        (None, Some(ckpt), Some(data)) => {
            let cfg = train_config_for(ckpt, a.config.as_deref())?;
            let (model, store) = load_model(ckpt)?;
            evaluate(&model, &store, &open_data(data)?, split_of(a.split), &cfg)?.report
        }
        _ => return Err(usage("pass --report, or --checkpoint with --data")),
    };
    analysis::roc_export(&report, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}
