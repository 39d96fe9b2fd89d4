use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session, Stream};
use crate::sdrformer::{collect_records, stack_samples, PhaseAttentionRecord, SdrFormer};
use crate::volforge::MultiPhaseSample;

/// Written per sample: the full grid plus per-phase channel means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFile {
    pub sample_id: String,
    pub label: usize,
    pub phase_names: Vec<String>,
    pub streams: Vec<StreamCoefficients>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamCoefficients {
    pub stream: Stream,
    /// Sums to 1 over phases.
    pub phase_means: Vec<f64>,
    /// `coefficients[k][j]` for phase `k`, channel `j`.
    pub coefficients: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientOutcome {
    Exported(Vec<PathBuf>),
    NotApplicable(String),
}

/// APSM coefficients of one preprocessed sample, one record per fusion point.
pub fn phase_coefficients(model: &SdrFormer, store: &ParamStore<f32>, sample: &MultiPhaseSample) -> Result<Vec<PhaseAttentionRecord>> {
    if model.cfg.n_phases < 2 {
        return Err(Error::NotApplicable("single-phase model has no APSM; phase coefficients are undefined".into()));
    }
    if !model.cfg.apsm_enabled {
        return Err(Error::NotApplicable("APSM is disabled in this model".into()));
    }
    let s = Session::eval(store);
    model.forward(&s, &Var::constant(stack_samples::<f32>(&[sample])?))?;
    collect_records(&s, std::slice::from_ref(&sample.sample_id))
}

fn stream_tag(s: Stream) -> &'static str {
    match s {
        Stream::High => "high",
        Stream::Low => "low",
        Stream::Merged => "merged",
    }
}

/// Writes `{sample_id}.coefficients.json` and one `{sample_id}.{stream}.png`
/// heat strip per record into `dir`. A model without APSM writes
/// `not_applicable.txt` instead and is not an error.
pub fn export_phase_coefficients(
    model: &SdrFormer,
    store: &ParamStore<f32>,
    sample: &MultiPhaseSample,
    dir: impl AsRef<Path>,
) -> Result<CoefficientOutcome> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = match phase_coefficients(model, store, sample) {
        Err(Error::NotApplicable(why)) => {
            let path = dir.join("not_applicable.txt");
            fs::write(&path, format!("not applicable: {why}\n")).map_err(|e| Error::io(&path, e))?;
            return Ok(CoefficientOutcome::NotApplicable(why));
        }
        r => r?,
    };
    let file = CoefficientFile {
        sample_id: sample.sample_id.clone(),
        label: sample.label,
        phase_names: sample.phases.iter().map(|p| p.phase_name.clone()).collect(),
        streams: records
            .iter()
            .map(|r| StreamCoefficients {
                stream: r.stream,
                phase_means: r.phase_means(),
                coefficients: r.coefficients.clone(),
            })
            .collect(),
    };
    let mut written = Vec::new();
    let json = dir.join(format!("{}.coefficients.json", sample.sample_id));
    fs::write(&json, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&json, e))?;
    written.push(json);
    for r in &records {
        let png = dir.join(format!("{}.{}.png", sample.sample_id, stream_tag(r.stream)));
        render_heat_strip(r, &png)?;
        written.push(png);
    }
    Ok(CoefficientOutcome::Exported(written))
}

/// Phases as rows, channels as columns, `CELL` pixels per entry. Colour runs
/// from dark blue at the grid minimum to yellow at the maximum.
pub fn render_heat_strip(record: &PhaseAttentionRecord, path: &Path) -> Result<()> {
    const CELL: u32 = 6;
    let n = record.coefficients.len() as u32;
    let c = record.coefficients.first().map_or(0, Vec::len) as u32;
    if n == 0 || c == 0 {
        return Err(Error::Metric("empty coefficient grid".into()));
    }
    let (lo, hi) = record
        .coefficients
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = RgbImage::from_fn(c * CELL, n * CELL, |x, y| {
        let t = (record.coefficients[(y / CELL) as usize][(x / CELL) as usize] - lo) / span;
        let ramp = |a: f64, b: f64| (255.0 * (a + (b - a) * t)).round() as u8;
        Rgb([ramp(0.05, 1.0), ramp(0.05, 0.9), ramp(0.35, 0.1)])
    });
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}
