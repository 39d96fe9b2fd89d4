use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// One operating point of a one-vs-rest ROC curve. Scores `>= threshold` are positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The first point's threshold is +inf, written as `null` in JSON.
    #[serde(deserialize_with = "threshold_or_inf")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn threshold_or_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// Starts at (0, 0), ends at (1, 1), nondecreasing in both coordinates.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the points.
    pub fn trapezoid_auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest AUC; absent when the class or its complement is missing.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub num_classes: usize,
    pub acc: f64,
    /// Binary AUC for two classes, macro one-vs-rest otherwise; absent when undefined.
    pub auc: Option<f64>,
    /// Macro F1 over classes that occur in the labels or the predictions.
    pub f1: f64,
    pub kappa: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Class 1 only for two classes, every class otherwise.
    pub roc: Vec<RocCurve>,
}

/// Compact view for logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            acc: self.acc,
            auc: self.auc,
            f1: self.f1,
            kappa: self.kappa,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Cohen's kappa of a confusion matrix. Zero when chance agreement is total.
pub fn cohen_kappa(confusion: &[Vec<usize>]) -> f64 {
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let k = confusion.len();
    let po = (0..k).map(|i| confusion[i][i]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: usize = confusion[i].iter().sum();
            let col: usize = confusion.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        0.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

/// Rank-based (Mann-Whitney) AUC with ties counted half; `None` without both classes.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// ROC points at every distinct score, with collinear interior points removed.
pub fn roc_curve(class: usize, scores: &[f64], positive: &[bool]) -> Option<RocCurve> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let mut kept: Vec<RocPoint> = vec![pts[0]];
    for w in 1..pts.len() {
        let (a, b) = (*kept.last().unwrap(), pts[w]);
        if let Some(c) = pts.get(w + 1) {
            let cross = (b.fpr - a.fpr) * (c.tpr - a.tpr) - (b.tpr - a.tpr) * (c.fpr - a.fpr);
            if cross.abs() < 1e-12 {
                continue;
            }
        }
        kept.push(b);
    }
    Some(RocCurve { class, points: kept })
}

/// All metrics from integer labels and per-sample class probabilities.
pub fn compute_metrics(labels: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Metric("empty split".into()));
    }
    if probs.len() != labels.len() || probs.iter().any(|p| p.len() != num_classes) || num_classes < 2 {
        return Err(Error::Metric(format!(
            "{} labels vs {} score rows for {num_classes} classes",
            labels.len(),
            probs.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Metric(format!("label {bad} out of range")));
    }
    if probs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite scores".into()));
    }
    let k = num_classes;
    let n = labels.len();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&l, &p) in labels.iter().zip(&preds) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();

    let mut per_class = Vec::with_capacity(k);
    let mut roc = Vec::new();
    for c in 0..k {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[c]).sum();
        let tp = confusion[c][c] as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auc = binary_auc(&scores, &positive);
        if k > 2 || c == 1 {
            roc.extend(roc_curve(c, &scores, &positive));
        }
        per_class.push(ClassMetrics {
            class: c,
            support,
            precision,
            recall,
            f1,
            auc,
        });
    }
    let present: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|m| m.support > 0 || confusion.iter().any(|r| r[m.class] > 0))
        .collect();
    let f1 = present.iter().map(|m| m.f1).sum::<f64>() / present.len() as f64;
    let auc = if k == 2 {
        per_class[1].auc
    } else {
        let defined: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(MetricsReport {
        n,
        num_classes: k,
        acc: correct as f64 / n as f64,
        auc,
        f1,
        kappa: cohen_kappa(&confusion),
        per_class,
        confusion,
        roc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    pub p_two_sided: f64,
    /// One-sided p for the alternative `mean(a) > mean(b)`.
    pub p_greater: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance two-sample t-test.
pub fn t_test_independent(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(format!(
            "t-test needs at least 2 observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite observation".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 == 0.0 {
        // Both samples constant: the difference is either exactly zero or certain.
        let (t, p2, pg) = if diff == 0.0 {
            (0.0, 1.0, 0.5)
        } else {
            (diff.signum() * f64::INFINITY, 0.0, if diff > 0.0 { 0.0 } else { 1.0 })
        };
        return Ok(TTestResult {
            t,
            df: (a.len() + b.len() - 2) as f64,
            p_two_sided: p2,
            p_greater: pg,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
    Ok(TTestResult {
        t,
        df,
        p_two_sided: (2.0 * dist.cdf(-t.abs())).min(1.0),
        p_greater: dist.cdf(-t),
    })
}
