//! Open-set metrics, significance tests, run reports and analysis exports.

mod analysis;
mod report;

pub use analysis::{export_analysis, mav_matrix, unknown_mav_magnitude, AnalysisFiles};
pub use report::{
    aggregate, evaluate, read_report_csv, significance_table, write_aggregate_csv, write_report_csv,
    write_significance_csv, AggregateRow, EvalReport, RunInfo, SignificanceRow, REPORT_COLUMNS,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("partial AUC needs at least one known and one unknown score (got {known} and {unknown})")]
    EmptyClass { known: usize, unknown: usize },
    #[error("FPR cap {0} outside (0, 1]")]
    BadCap(f64),
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

/// Area under the ROC curve for FPR in `[0, fpr_cap]`, not rescaled, so a
/// perfect detector scores `fpr_cap`. Unknown samples are the positives and
/// higher scores mean more unknown. Tied scores form one ROC step, which
/// reproduces midrank handling.
pub fn partial_auc(scores_known: &[f64], scores_unknown: &[f64], fpr_cap: f64) -> Result<f64, EvalError> {
    if scores_known.is_empty() || scores_unknown.is_empty() {
        return Err(EvalError::EmptyClass { known: scores_known.len(), unknown: scores_unknown.len() });
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(EvalError::BadCap(fpr_cap));
    }
    if let Some(&bad) = scores_known.iter().chain(scores_unknown).find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(bad));
    }
    let mut all: Vec<(f64, bool)> =
        scores_known.iter().map(|&s| (s, false)).chain(scores_unknown.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (scores_unknown.len() as f64, scores_known.len() as f64);

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut x0, mut y0) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x1, y1) = (fp as f64 / nn, tp as f64 / np);
        if x1 > x0 {
            if x1 >= fpr_cap {
                let y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0);
                area += (fpr_cap - x0) * (y0 + y_cap) / 2.0;
                return Ok(area);
            }
            area += (x1 - x0) * (y0 + y1) / 2.0;
        }
        (x0, y0) = (x1, y1);
    }
    Ok(area)
}

/// One-vs-rest F1 over the `C + 1` open-set classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Known classes `0..C`, then the unknown class.
    pub per_class: Vec<f64>,
    /// Macro average over the known classes.
    pub known: f64,
    pub unknown: f64,
    /// Mean over all `C + 1` classes.
    pub overall: f64,
}

/// Labels are in `[0, C]` with `C` the unknown class. A class with no true
/// and no predicted samples has F1 0.
pub fn f1_scores(truth: &[usize], pred: &[usize], num_known: usize) -> F1Scores {
    let k = num_known + 1;
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&t, &p) in truth.iter().zip(pred) {
        let (t, p) = (t.min(num_known), p.min(num_known));
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let known = if num_known == 0 { 0.0 } else { per_class[..num_known].iter().sum::<f64>() / num_known as f64 };
    F1Scores { unknown: per_class[num_known], overall: per_class.iter().sum::<f64>() / k as f64, known, per_class }
}

/// Paired two-sided t-test on `b - a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
    /// All differences were equal, so the t statistic is undefined.
    pub degenerate: bool,
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<SignificanceResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    // differences equal up to rounding count as constant
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if var.sqrt() <= 1e-12 * scale {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(mean), 0.0) };
        return Ok(SignificanceResult { n, mean_diff: mean, t, df, p, significant: p < 0.05, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(SignificanceResult { n, mean_diff: mean, t, df, p, significant: p < 0.05, degenerate: false })
}
