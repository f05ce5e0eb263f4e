use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f1_scores, paired_ttest, partial_auc, SignificanceResult};
use crate::error::{Error, Result};
use crate::pipeline::Prediction;

/// Fixed column order of `report.csv`. A trailing `repeat` column follows.
pub const REPORT_COLUMNS: [&str; 11] = [
    "dataset",
    "split_seed",
    "loss",
    "extension",
    "lambda",
    "auc_full",
    "auc_fpr10",
    "f1_known",
    "f1_unknown",
    "f1_overall",
    "train_seconds",
];

/// Identifies one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: String,
    pub split_seed: u64,
    pub repeat: usize,
    pub loss: String,
    pub extension: String,
    pub lambda: f64,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub info: RunInfo,
    pub auc_full: f64,
    /// Unnormalized, at most 0.1.
    pub auc_fpr10: f64,
    /// Known classes then unknown. Empty when read back from `report.csv`.
    pub f1_per_class: Vec<f64>,
    pub f1_known: f64,
    pub f1_unknown: f64,
    pub f1_overall: f64,
}

/// Scores test predictions whose true labels lie in `[0, C]`.
pub fn evaluate(preds: &[Prediction], truth: &[usize], num_known: usize, info: RunInfo) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(super::EvalError::LengthMismatch(preds.len(), truth.len()).into());
    }
    let (mut known, mut unknown) = (Vec::new(), Vec::new());
    for (p, &t) in preds.iter().zip(truth) {
        if t >= num_known {
            unknown.push(p.outlier_score);
        } else {
            known.push(p.outlier_score);
        }
    }
    let pred: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let f1 = f1_scores(truth, &pred, num_known);
    Ok(EvalReport {
        info,
        auc_full: partial_auc(&known, &unknown, 1.0)?,
        auc_fpr10: partial_auc(&known, &unknown, 0.1)?,
        f1_known: f1.known,
        f1_unknown: f1.unknown,
        f1_overall: f1.overall,
        f1_per_class: f1.per_class,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

pub fn write_report_csv(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header: Vec<&str> = REPORT_COLUMNS.to_vec();
    header.push("repeat");
    w.write_record(&header).map_err(&err)?;
    for r in reports {
        let i = &r.info;
        w.write_record([
            i.dataset.clone(),
            i.split_seed.to_string(),
            i.loss.clone(),
            i.extension.clone(),
            i.lambda.to_string(),
            r.auc_full.to_string(),
            r.auc_fpr10.to_string(),
            r.f1_known.to_string(),
            r.f1_unknown.to_string(),
            r.f1_overall.to_string(),
            format!("{:.6}", i.train_seconds),
            i.repeat.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let err = csv_err(path);
    let mut r = csv::Reader::from_path(path).map_err(&err)?;
    let header = r.headers().map_err(&err)?.clone();
    if header.len() < REPORT_COLUMNS.len() || header.iter().zip(REPORT_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Config(format!("{}: header does not start with {}", path.display(), REPORT_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(&err)?;
        let bad = |col: &str| Error::Config(format!("{}, row {}: bad {col}", path.display(), line + 1));
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad(REPORT_COLUMNS[i]));
        out.push(EvalReport {
            info: RunInfo {
                dataset: rec[0].to_string(),
                split_seed: rec[1].trim().parse().map_err(|_| bad("split_seed"))?,
                repeat: match rec.get(11) {
                    Some(v) => v.trim().parse().map_err(|_| bad("repeat"))?,
                    None => 0,
                },
                loss: rec[2].to_string(),
                extension: rec[3].to_string(),
                lambda: num(4)?,
                train_seconds: num(10)?,
            },
            auc_full: num(5)?,
            auc_fpr10: num(6)?,
            f1_per_class: Vec::new(),
            f1_known: num(7)?,
            f1_unknown: num(8)?,
            f1_overall: num(9)?,
        });
    }
    Ok(out)
}

/// Mean metrics of one (dataset, loss, extension) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub loss: String,
    pub extension: String,
    pub runs: usize,
    pub auc_full: f64,
    pub auc_fpr10: f64,
    pub f1_known: f64,
    pub f1_unknown: f64,
    pub f1_overall: f64,
    pub train_seconds: f64,
}

/// Groups in order of first appearance.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let key = (r.info.dataset.clone(), r.info.loss.clone(), r.info.extension.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let mean = |f: fn(&EvalReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            AggregateRow {
                runs: rows.len(),
                auc_full: mean(|r| r.auc_full),
                auc_fpr10: mean(|r| r.auc_fpr10),
                f1_known: mean(|r| r.f1_known),
                f1_unknown: mean(|r| r.f1_unknown),
                f1_overall: mean(|r| r.f1_overall),
                train_seconds: mean(|r| r.info.train_seconds),
                dataset: key.0,
                loss: key.1,
                extension: key.2,
            }
        })
        .collect()
}

/// Paired comparison of an extension against the standalone loss on one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub dataset: String,
    pub loss: String,
    pub extension: String,
    pub metric: String,
    /// `None` when fewer than two runs pair up.
    pub result: Option<SignificanceResult>,
    /// `(split_seed, repeat)` present on only one side.
    pub unpaired: Vec<(u64, usize)>,
}

const TESTED_METRICS: [(&str, fn(&EvalReport) -> f64); 5] = [
    ("auc_full", |r| r.auc_full),
    ("auc_fpr10", |r| r.auc_fpr10),
    ("f1_known", |r| r.f1_known),
    ("f1_unknown", |r| r.f1_unknown),
    ("f1_overall", |r| r.f1_overall),
];

/// Paired t-tests of every extension against the `none` runs of the same
/// dataset and loss, matched by split seed and repeat.
pub fn significance_table(reports: &[EvalReport]) -> Vec<SignificanceRow> {
    type RunKey = (u64, usize);
    let mut groups: Vec<((String, String, String), BTreeMap<RunKey, &EvalReport>)> = Vec::new();
    for r in reports {
        let key = (r.info.dataset.clone(), r.info.loss.clone(), r.info.extension.clone());
        let pos = match groups.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                groups.push((key, BTreeMap::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.insert((r.info.split_seed, r.info.repeat), r);
    }
    let mut out = Vec::new();
    for ((dataset, loss, ext), runs) in &groups {
        if ext == "none" {
            continue;
        }
        let Some((_, base)) = groups.iter().find(|(k, _)| k.0 == *dataset && k.1 == *loss && k.2 == "none") else {
            continue;
        };
        let paired: Vec<RunKey> = runs.keys().filter(|k| base.contains_key(k)).copied().collect();
        let unpaired: Vec<RunKey> =
            runs.keys().chain(base.keys()).filter(|k| !(runs.contains_key(k) && base.contains_key(k))).copied().collect();
        for (metric, get) in TESTED_METRICS {
            let a: Vec<f64> = paired.iter().map(|k| get(base[k])).collect();
            let b: Vec<f64> = paired.iter().map(|k| get(runs[k])).collect();
            out.push(SignificanceRow {
                dataset: dataset.clone(),
                loss: loss.clone(),
                extension: ext.clone(),
                metric: metric.to_string(),
                result: paired_ttest(&a, &b).ok(),
                unpaired: unpaired.clone(),
            });
        }
    }
    out
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let path = path.as_ref();
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    for r in rows {
        w.serialize(r).map_err(&err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_significance_csv(path: impl AsRef<Path>, rows: &[SignificanceRow]) -> Result<()> {
    let path = path.as_ref();
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["dataset", "loss", "extension", "metric", "n", "mean_diff", "t", "df", "p", "significant", "degenerate", "unpaired"])
        .map_err(&err)?;
    for r in rows {
        let unpaired = r.unpaired.iter().map(|(s, k)| format!("{s}/{k}")).collect::<Vec<_>>().join(" ");
        let stats = match &r.result {
            Some(s) => vec![
                s.n.to_string(),
                s.mean_diff.to_string(),
                s.t.to_string(),
                s.df.to_string(),
                s.p.to_string(),
                s.significant.to_string(),
                s.degenerate.to_string(),
            ],
            None => vec![String::new(); 7],
        };
        let mut rec = vec![r.dataset.clone(), r.loss.clone(), r.extension.clone(), r.metric.clone()];
        rec.extend(stats);
        rec.push(unpaired);
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush()?;
    Ok(())
}
