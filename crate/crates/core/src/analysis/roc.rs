use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{MetricsReport, RocCurve, RocPoint};

#[derive(Debug, Serialize, Deserialize)]
struct RocRow {
    class: usize,
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes every ROC curve of `report` as CSV rows `class,threshold,fpr,tpr`.
pub fn roc_export(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.roc.is_empty() {
        return Err(Error::Metric("missing scores: the report has no ROC curve (a class is absent from the split)".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for curve in &report.roc {
        for p in &curve.points {
            w.serialize(RocRow {
                class: curve.class,
                threshold: p.threshold,
                fpr: p.fpr,
                tpr: p.tpr,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads curves written by [`roc_export`], in file order.
pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<Vec<RocCurve>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<RocCurve> = Vec::new();
    for row in r.deserialize::<RocRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let point = RocPoint {
            threshold: row.threshold,
            fpr: row.fpr,
            tpr: row.tpr,
        };
        match out.last_mut() {
            Some(c) if c.class == row.class => c.points.push(point),
            _ => out.push(RocCurve {
                class: row.class,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}
