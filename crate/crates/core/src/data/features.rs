use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

/// Width of a flattened 63x63 call-graph adjacency matrix.
const MATRIX_FEATURES: usize = 63 * 63;

/// Loads a `label,f0,...,f{D-1}` CSV. Labels may be integers or names;
/// classes are numbered in ascending label order. Files with 3969 features
/// get per-sample shape `[1, 63, 63]`, all others `[D]`.
///
/// Features are returned unscaled; fit a [`MinMaxScaler`] on the training
/// split.
pub fn load_feature_csv(path: impl AsRef<Path>, feature_count: usize) -> Result<Dataset> {
    load(path.as_ref(), feature_count, None)
}

/// As [`load_feature_csv`], with a fixed class list. Labels outside it are
/// rejected.
pub fn load_feature_csv_with_classes(path: impl AsRef<Path>, feature_count: usize, classes: &[String]) -> Result<Dataset> {
    load(path.as_ref(), feature_count, Some(classes))
}

fn load(path: &Path, d: usize, classes: Option<&[String]>) -> Result<Dataset> {
    let csv_err = |line: u64, msg: String| DataError::Csv { path: path.to_path_buf(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let expected: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|j| format!("f{j}"))).collect();
    if header.len() != d + 1 || header.iter().zip(&expected).any(|(a, b)| a != b) {
        let shown: Vec<&str> = header.iter().take(4).collect();
        return Err(csv_err(1, format!("expected header label,f0,...,f{} ({} columns), found {} columns starting {shown:?}", d.saturating_sub(1), d + 1, header.len())));
    }

    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(csv_err(line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        raw_labels.push((line, rec[0].to_string()));
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| csv_err(line, format!("column f{j}: {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("column f{j}: non-finite value {cell}")));
            }
            data.push(v);
        }
    }

    let names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let set: BTreeSet<&str> = raw_labels.iter().map(|(_, l)| l.as_str()).collect();
            let mut names: Vec<String> = set.into_iter().map(String::from).collect();
            if names.iter().all(|n| n.parse::<u64>().is_ok()) {
                names.sort_by_key(|n| n.parse::<u64>().unwrap());
            }
            names
        }
    };
    let labels = raw_labels
        .into_iter()
        .map(|(line, l)| {
            names.iter().position(|n| *n == l).ok_or(DataError::UnknownLabel { path: path.to_path_buf(), line, label: l })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = labels.len();
    let shape = if d == MATRIX_FEATURES { vec![n, 1, 63, 63] } else { vec![n, d] };
    let features = Tensor::new(shape, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, names)
}

/// Writes `ds` in the format read by [`load_feature_csv`], one row per
/// sample with features flattened.
pub fn write_feature_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| DataError::Invalid(format!("{}: {e}", path.display()));
    let d: usize = ds.feature_shape.iter().product();
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|j| format!("f{j}"))).collect();
    w.write_record(&header).map_err(err)?;
    for (row, &label) in ds.features.data().chunks_exact(d.max(1)).zip(&ds.labels) {
        let rec: Vec<String> = std::iter::once(ds.class_names[label].clone()).chain(row.iter().map(|v| v.to_string())).collect();
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Per-column affine map onto `[0, 1]` fitted on one set of samples.
/// Constant columns map to 0. Values outside the fitted range are not
/// clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on `[N, ...]` features, one column per flattened feature.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(DataError::Invalid("cannot fit a scaler on zero samples".into()));
        }
        let d = x.len() / n;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in x.data().chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.min.len();
        if d == 0 || x.len() % d != 0 || x.shape().iter().skip(1).product::<usize>() != d {
            return Err(DataError::Invalid(format!("scaler fitted on {d} columns, got shape {:?}", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                let range = self.max[j] - self.min[j];
                *v = if range > 0.0 { (*v - self.min[j]) / range } else { 0.0 };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn four_row_fixture_scales_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.csv", "label,f0,f1,f2\n1,0,10,5\n0,2,20,5\n1,4,30,5\n0,8,50,5\n");
        let ds = load_feature_csv(&p, 3).unwrap();
        assert_eq!(ds.labels, vec![1, 0, 1, 0]);
        assert_eq!(ds.class_names, vec!["0", "1"]);
        assert_eq!(ds.feature_shape, vec![3]);
        let scaler = MinMaxScaler::fit(&ds.features).unwrap();
        let x = scaler.transform(&ds.features).unwrap();
        let want = [0.0, 0.0, 0.0, 0.25, 0.25, 0.0, 0.5, 0.5, 0.0, 1.0, 1.0, 0.0];
        for (a, b) in x.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.csv", "label,f0\n10,1\n9,2\n2,3\n");
        let ds = load_feature_csv(&p, 1).unwrap();
        assert_eq!(ds.class_names, vec!["2", "9", "10"]);
        assert_eq!(ds.labels, vec![2, 1, 0]);
    }

    #[test]
    fn call_graph_matrices_are_square() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("label");
        (0..3969).for_each(|j| text.push_str(&format!(",f{j}")));
        text.push('\n');
        for r in 0..2 {
            text.push_str(&r.to_string());
            (0..3969).for_each(|j| text.push_str(&format!(",{}", (j + r) % 7)));
            text.push('\n');
        }
        let p = write(dir.path(), "mc.csv", &text);
        let ds = load_feature_csv(&p, 3969).unwrap();
        assert_eq!(ds.feature_shape, vec![1, 63, 63]);
        assert_eq!(ds.features.shape(), &[2, 1, 63, 63]);
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = write(dir.path(), "a.csv", "label,f0,f1\n0,1,2\n1,3\n");
        let err = load_feature_csv(&ragged, 2).unwrap_err();
        assert!(matches!(err, DataError::Csv { line: 3, .. }), "{err}");

        let text = write(dir.path(), "b.csv", "label,f0\n0,abc\n");
        let err = load_feature_csv(&text, 1).unwrap_err();
        assert!(err.to_string().contains("not a number"), "{err}");

        let header = write(dir.path(), "c.csv", "y,f0\n0,1\n");
        assert!(load_feature_csv(&header, 1).is_err());
        assert!(load_feature_csv(write(dir.path(), "d.csv", "label,f0\n0,1\n"), 2).is_err());

        let classes = vec!["benign".to_string(), "trojan".to_string()];
        let unknown = write(dir.path(), "e.csv", "label,f0\ntrojan,1\nworm,2\n");
        let err = load_feature_csv_with_classes(&unknown, 1, &classes).unwrap_err();
        assert!(matches!(err, DataError::UnknownLabel { line: 3, ref label, .. } if label == "worm"));
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synthetic::call_graph_like(3, 4, 7, 1);
        let p = dir.path().join("w.csv");
        write_feature_csv(&ds, &p).unwrap();
        let back = load_feature_csv_with_classes(&p, 7, &ds.class_names).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn constant_column_scales_to_zero() {
        let x = Tensor::from_rows(&[[3.0, 1.0], [3.0, 2.0]]).unwrap();
        let s = MinMaxScaler::fit(&x).unwrap();
        let y = s.transform(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(y.all_finite());
    }
}
