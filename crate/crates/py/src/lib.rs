//! `pysdrformer`: model construction, inference, training and analysis from Python.
//! Arrays go in through the buffer protocol (float32, C order); structured
//! results come back as plain dicts and lists.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use pyo3::buffer::PyBuffer;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use sdrformer::analysis;
use sdrformer::autograd::{softmax_last, Var};
use sdrformer::nn::{ParamStore, Session, Stream};
use sdrformer::sdrformer::{adapt_phase_count as surgery, collect_records, Checkpoint, SdrFormer, SdrFormerConfig};
use sdrformer::trainer::{self, FitOptions, TrainConfig};
use sdrformer::volforge::{generate_synthetic_dataset, Dataset, MultiPhaseSample, PhaseVolume, SignalLayout, Split, SynthConfig};
use sdrformer::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn split_of(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split `{name}`"))),
    }
}

fn array_from(obj: &Bound<'_, PyAny>) -> PyResult<ArrayD<f32>> {
    let buf = PyBuffer::<f32>::get(obj)?;
    let shape = buf.shape().to_vec();
    let data = buf.to_vec(obj.py())?;
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A model plus its parameters.
#[pyclass(module = "pysdrformer")]
struct Model {
    model: SdrFormer,
    store: ParamStore<f32>,
}

impl Model {
    fn logits(&self, x: ArrayD<f32>) -> PyResult<(ArrayD<f32>, Vec<sdrformer::sdrformer::PhaseAttentionRecord>)> {
        let s = Session::eval(&self.store);
        let logits = self.model.forward(&s, &Var::constant(x)).map_err(err)?;
        let ids: Vec<String> = (0..logits.shape()[0]).map(|b| b.to_string()).collect();
        let records = collect_records(&s, &ids).map_err(err)?;
        Ok((logits.value().clone(), records))
    }

    /// A `(1, N, 1, D, H, W)` input as a sample, phases named by index.
    fn sample_from(&self, x: &ArrayD<f32>) -> PyResult<MultiPhaseSample> {
        let sh = x.shape();
        if sh.len() != 6 || sh[0] != 1 || sh[2] != 1 {
            return Err(PyValueError::new_err(format!("expected one sample shaped (1, N, 1, D, H, W), got {sh:?}")));
        }
        let phases = (0..sh[1])
            .map(|p| {
                let v = x
                    .slice(ndarray::s![0, p, 0, .., .., ..])
                    .to_owned();
                PhaseVolume::new(v, format!("phase{p}")).map_err(err)
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(MultiPhaseSample {
            sample_id: "input".into(),
            phases,
            label: 0,
            split: Split::Test,
            mask: None,
        })
    }
}

fn rows(a: &ArrayD<f32>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

#[pymethods]
impl Model {
    /// Fresh model from a JSON model config (default: full-size, 3 phases, 2 classes).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: SdrFormerConfig = parse_json(config_json)?;
        let (model, store) = SdrFormer::init::<f32>(&cfg, seed).map_err(err)?;
        Ok(Self { model, store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, store) = Checkpoint::load(&path).and_then(|c| c.instantiate::<f32>()).map_err(err)?;
        Ok(Self { model, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_store(&self.model.cfg, &self.store).save(&path).map_err(err)
    }

    #[getter]
    fn n_phases(&self) -> usize {
        self.model.cfg.n_phases
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model.cfg).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Logits for a float32 `(B, N, 1, D, H, W)` array, as a B x K list.
    fn forward(&self, x: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.logits(array_from(x)?)?.0))
    }

    fn predict_proba(&self, x: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
        let (logits, _) = self.logits(array_from(x)?)?;
        Ok(rows(softmax_last(&Var::constant(logits)).value()))
    }

    /// APSM records for a batch: dicts with `stream`, `sample_id` (batch index) and
    /// the `coefficients` grid. Raises for single-phase models.
    fn phase_coefficients(&self, py: Python<'_>, x: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        if !self.model.cfg.fuses_phases() || !self.model.cfg.apsm_enabled {
            return Err(err(Error::NotApplicable("this model has no APSM".into())));
        }
        let (_, records) = self.logits(array_from(x)?)?;
        to_py(py, &records)
    }

    /// Grad-CAM heat maps for one sample, one `D x H x W` nested list per phase.
    #[pyo3(signature = (x, target_class, stream="high", stage=None))]
    fn gradcam(&self, x: &Bound<'_, PyAny>, target_class: usize, stream: &str, stage: Option<usize>) -> PyResult<Vec<Vec<Vec<Vec<f32>>>>> {
        let stream = match stream {
            "high" => Stream::High,
            "low" => Stream::Low,
            _ => return Err(PyValueError::new_err(format!("stream must be `high` or `low`, got `{stream}`"))),
        };
        let sample = self.sample_from(&array_from(x)?)?;
        let stage = stage.unwrap_or(self.model.cfg.backbone.num_stages());
        let maps = analysis::gradcam3d(&self.model, &self.store, &sample, target_class, stream, stage).map_err(err)?;
        Ok(maps
            .into_iter()
            .map(|m| m.heat.outer_iter().map(|sl| sl.outer_iter().map(|r| r.to_vec()).collect()).collect())
            .collect())
    }

    /// Metrics report on a dataset split, preprocessing from `train_config_json`.
    #[pyo3(signature = (manifest, split="test", train_config_json=None))]
    fn evaluate(&self, py: Python<'_>, manifest: PathBuf, split: &str, train_config_json: Option<&str>) -> PyResult<Py<PyAny>> {
        let cfg: TrainConfig = parse_json(train_config_json)?;
        let data = Dataset::open(&manifest).map_err(err)?;
        let e = trainer::evaluate(&self.model, &self.store, &data, split_of(split)?, &cfg).map_err(err)?;
        to_py(py, &e.report)
    }

    #[pyo3(signature = (dims=(14, 112, 112)))]
    fn profile(&self, py: Python<'_>, dims: (usize, usize, usize)) -> PyResult<Py<PyAny>> {
        to_py(py, &analysis::profile(&self.model.cfg, [dims.0, dims.1, dims.2]).map_err(err)?)
    }
}

/// Complexity report for a model config.
#[pyfunction]
#[pyo3(signature = (config_json=None, dims=(14, 112, 112)))]
fn profile(py: Python<'_>, config_json: Option<&str>, dims: (usize, usize, usize)) -> PyResult<Py<PyAny>> {
    let cfg: SdrFormerConfig = parse_json(config_json)?;
    to_py(py, &analysis::profile(&cfg, [dims.0, dims.1, dims.2]).map_err(err)?)
}

/// ACC, AUC, F1, kappa, confusion matrix and ROC curves.
#[pyfunction]
fn compute_metrics(py: Python<'_>, labels: Vec<usize>, probs: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    let k = probs.first().map_or(0, Vec::len);
    to_py(py, &trainer::compute_metrics(&labels, &probs, k).map_err(err)?)
}

/// Welch's two-sample t-test.
#[pyfunction]
fn t_test(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &trainer::t_test_independent(&a, &b).map_err(err)?)
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n, phases=3, classes=2, dims=(8, 32, 32), contrast=0.8, noise=0.3, seed=0, signal_phase=None))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    out_dir: PathBuf,
    n: usize,
    phases: usize,
    classes: usize,
    dims: (usize, usize, usize),
    contrast: f64,
    noise: f64,
    seed: u64,
    signal_phase: Option<usize>,
) -> PyResult<String> {
    let mut cfg = SynthConfig::new(n, phases, classes, [dims.0, dims.1, dims.2], contrast, noise, seed);
    if let Some(phase) = signal_phase {
        cfg.layout = SignalLayout::SinglePhase { phase };
    }
    let (_, path) = generate_synthetic_dataset(&cfg, &out_dir).map_err(err)?;
    Ok(path.display().to_string())
}

/// Trains on a manifest; returns the best model and the epoch log.
#[pyfunction]
#[pyo3(signature = (manifest, model_config_json=None, train_config_json=None, out_dir=None))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    model_config_json: Option<&str>,
    train_config_json: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<(Model, Py<PyAny>)> {
    let model_cfg: SdrFormerConfig = parse_json(model_config_json)?;
    let cfg: TrainConfig = parse_json(train_config_json)?;
    let mut data = Dataset::open(&manifest).map_err(err)?;
    data.preload().map_err(err)?;
    let opts = FitOptions {
        out_dir,
        ..FitOptions::default()
    };
    let outcome = py.detach(|| trainer::fit(&model_cfg, &data, &cfg, &opts)).map_err(err)?;
    let (model, store) = outcome.best.instantiate::<f32>().map_err(err)?;
    Ok((Model { model, store }, to_py(py, &outcome.log)?))
}

/// Phase-count surgery on a saved checkpoint; writes the result to `out` and
/// returns the surgery report text.
#[pyfunction]
#[pyo3(signature = (checkpoint, out, n_phases, n_classes=None, seed=0))]
fn adapt_phase_count(checkpoint: PathBuf, out: PathBuf, n_phases: usize, n_classes: Option<usize>, seed: u64) -> PyResult<String> {
    let src = Checkpoint::load(Path::new(&checkpoint)).map_err(err)?;
    let (dst, report) = surgery(&src, n_phases, n_classes, seed).map_err(err)?;
    dst.save(&out).map_err(err)?;
    Ok(report.to_text())
}

#[pymodule]
fn pysdrformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(t_test, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(adapt_phase_count, m)?)?;
    Ok(())
}
