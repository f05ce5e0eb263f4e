use std::path::{Path, PathBuf};

use crate::data::Subset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::pipeline::{OutlierModel, EMBED_CHUNK};
use crate::tensor::Tensor;

/// Files written by [`export_analysis`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisFiles {
    pub mav: PathBuf,
    pub outlier_scores: PathBuf,
    pub embeddings: PathBuf,
}

/// Mean representation per label in `0..rows`. A label without samples
/// yields a row of NaN.
pub fn mav_matrix(z: &Tensor, labels: &[usize], rows: usize) -> Vec<Vec<f64>> {
    let f = z.shape()[1];
    let mut sums = vec![vec![0.0; f]; rows];
    let mut counts = vec![0usize; rows];
    for (r, &y) in z.rows().zip(labels) {
        if y < rows {
            sums[y].iter_mut().zip(r).for_each(|(s, v)| *s += v);
            counts[y] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { vec![f64::NAN; f] } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

/// Mean absolute entry of the last (unknown-class) row.
pub fn unknown_mav_magnitude(mav: &[Vec<f64>]) -> f64 {
    let row = mav.last().map(Vec::as_slice).unwrap_or(&[]);
    row.iter().map(|v| v.abs()).sum::<f64>() / row.len().max(1) as f64
}

/// Writes `mav.csv` (known centroids plus the unknown test MAV),
/// `outlier_scores.csv` and `embeddings.csv` for the test subset.
pub fn export_analysis(
    net: &Network,
    model: &OutlierModel,
    test: &Subset,
    class_names: &[String],
    out_dir: impl AsRef<Path>,
) -> Result<AnalysisFiles> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let c = model.num_classes();
    let z = net.embed(&test.x, EMBED_CHUNK)?;
    let unknown = mav_matrix(&z, &test.labels, c + 1).pop().unwrap_or_default();
    if unknown.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("test subset holds no unknown samples".into()));
    }
    let mut mav = model.centroids.clone();
    mav.push(unknown);

    let files = AnalysisFiles {
        mav: out_dir.join("mav.csv"),
        outlier_scores: out_dir.join("outlier_scores.csv"),
        embeddings: out_dir.join("embeddings.csv"),
    };
    let f = z.shape()[1];
    let feature_cols = (0..f).map(|j| format!("z{j}"));

    let mut w = writer(&files.mav)?;
    write(&mut w, std::iter::once("class".to_string()).chain(feature_cols.clone()))?;
    for (i, row) in mav.iter().enumerate() {
        let name = class_names.get(i).cloned().unwrap_or_else(|| if i == c { "unknown".into() } else { i.to_string() });
        write(&mut w, std::iter::once(name).chain(row.iter().map(|v| format!("{v:.17e}"))))?;
    }
    w.flush()?;

    let preds = model.predict(&z);
    let mut w = writer(&files.outlier_scores)?;
    write(&mut w, ["index", "true_label", "pred_label", "outlier_score", "is_unknown"].map(String::from))?;
    for ((i, &t), p) in test.indices.iter().zip(&test.labels).zip(&preds) {
        let flag = if t >= c { "1" } else { "0" };
        write(&mut w, [i.to_string(), t.to_string(), p.label.to_string(), format!("{:.17e}", p.outlier_score), flag.into()])?;
    }
    w.flush()?;

    let mut w = writer(&files.embeddings)?;
    write(&mut w, ["index".to_string(), "true_label".to_string()].into_iter().chain(feature_cols))?;
    for ((i, &t), row) in test.indices.iter().zip(&test.labels).zip(z.rows()) {
        write(&mut w, [i.to_string(), t.to_string()].into_iter().chain(row.iter().map(|v| format!("{v:.17e}"))))?;
    }
    w.flush()?;
    Ok(files)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))
}

fn write(w: &mut csv::Writer<std::fs::File>, rec: impl IntoIterator<Item = String>) -> Result<()> {
    w.write_record(rec.into_iter().collect::<Vec<_>>()).map_err(|e| Error::Io(e.into()))
}
