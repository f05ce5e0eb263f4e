use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MinMaxScaler, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub n_known: usize,
    /// Share of each known class's samples used for training.
    pub train_fraction: f64,
    /// Share of each class's training samples held out for validation.
    pub validation_fraction: f64,
    /// Min-max scale features with statistics of the training subset.
    pub scale: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { n_known: 6, train_fraction: 0.75, validation_fraction: 0.0, scale: false }
    }
}

/// Rows drawn from a source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub x: Tensor,
    /// Known classes as `0..C` in ascending original id; unknown as `C`.
    pub labels: Vec<usize>,
    pub original_labels: Vec<usize>,
    /// Row numbers in the source dataset.
    pub indices: Vec<usize>,
}

impl Subset {
    fn take(ds: &Dataset, indices: Vec<usize>, map: &BTreeMap<usize, usize>, unknown: usize) -> Self {
        let original_labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
        Self {
            x: ds.features.select_rows(&indices),
            labels: original_labels.iter().map(|l| map.get(l).copied().unwrap_or(unknown)).collect(),
            original_labels,
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Known classes for training; the remaining classes appear only in `test`,
/// all labeled `C = known_class_ids.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetSplit {
    pub seed: u64,
    /// Original ids, ascending; position is the mapped label.
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
    /// Names of the known classes followed by `"unknown"`.
    pub class_names: Vec<String>,
    pub train: Subset,
    pub validation: Subset,
    pub test: Subset,
    pub scaler: Option<MinMaxScaler>,
}

impl OpenSetSplit {
    /// Number of known classes `C`.
    pub fn num_known(&self) -> usize {
        self.known_class_ids.len()
    }

    pub fn unknown_label(&self) -> usize {
        self.num_known()
    }

    fn build(
        ds: &Dataset,
        seed: u64,
        known: Vec<usize>,
        train: Vec<usize>,
        validation: Vec<usize>,
        test: Vec<usize>,
        scale: bool,
    ) -> Result<Self> {
        let unknown_ids: Vec<usize> = (0..ds.num_classes()).filter(|c| !known.contains(c)).collect();
        let map: BTreeMap<usize, usize> = known.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        let c = known.len();
        let mut split = Self {
            seed,
            class_names: known.iter().map(|&k| ds.class_names[k].clone()).chain(["unknown".to_string()]).collect(),
            train: Subset::take(ds, train, &map, c),
            validation: Subset::take(ds, validation, &map, c),
            test: Subset::take(ds, test, &map, c),
            known_class_ids: known,
            unknown_class_ids: unknown_ids,
            scaler: None,
        };
        if split.train.is_empty() {
            return Err(DataError::Invalid("open split has an empty training set".into()));
        }
        if !split.test.labels.contains(&c) {
            return Err(DataError::Invalid("open split has no unknown-class test samples".into()));
        }
        if scale {
            let scaler = MinMaxScaler::fit(&split.train.x)?;
            for s in [&mut split.train, &mut split.validation, &mut split.test] {
                if !s.is_empty() {
                    s.x = scaler.transform(&s.x)?;
                }
            }
            split.scaler = Some(scaler);
        }
        Ok(split)
    }
}

/// Picks `n_known` classes at random, splits each known class's samples
/// `train_fraction : 1 - train_fraction`, and sends every unknown-class
/// sample to the test set. Deterministic in `seed`.
pub fn make_open_split(ds: &Dataset, opts: &SplitOptions, seed: u64) -> Result<OpenSetSplit> {
    let k = ds.num_classes();
    if k <= opts.n_known || opts.n_known < 2 {
        return Err(DataError::TooFewClasses { classes: k, known: opts.n_known });
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) || !(0.0..1.0).contains(&opts.validation_fraction) {
        return Err(DataError::Invalid(format!(
            "train fraction {} must be in (0, 1) and validation fraction {} in [0, 1)",
            opts.train_fraction, opts.validation_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut known = classes[..opts.n_known].to_vec();
    known.sort_unstable();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        members[l].push(i);
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        let mut rows = members[c].clone();
        if !known.contains(&c) {
            test.extend(rows);
            continue;
        }
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_train = if n >= 2 { ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n - 1) } else { n };
        let n_val = ((n_train as f64 * opts.validation_fraction).round() as usize).min(n_train.saturating_sub(1));
        validation.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    for v in [&mut train, &mut validation, &mut test] {
        v.sort_unstable();
    }
    OpenSetSplit::build(ds, seed, known, train, validation, test, opts.scale)
}

/// Writes `split,index,original_label,mapped_label` rows.
pub fn write_manifest(split: &OpenSetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| DataError::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["split", "index", "original_label", "mapped_label"]).map_err(err)?;
    for (name, s) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        for ((i, o), m) in s.indices.iter().zip(&s.original_labels).zip(&s.labels) {
            w.write_record([name, &i.to_string(), &o.to_string(), &m.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

#[derive(Deserialize)]
struct ManifestRow {
    split: String,
    index: usize,
    original_label: usize,
    mapped_label: usize,
}

/// Rebuilds a split of `ds` from a manifest, checking it against the data.
pub fn read_manifest(ds: &Dataset, path: impl AsRef<Path>, seed: u64, scale: bool) -> Result<OpenSetSplit> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for (k, rec) in r.deserialize::<ManifestRow>().enumerate() {
        let line = k as u64 + 2;
        let row = rec.map_err(|e| DataError::Csv { path: path.to_path_buf(), line, msg: e.to_string() })?;
        if row.index >= ds.len() || ds.labels[row.index] != row.original_label {
            return Err(DataError::Csv { path: path.to_path_buf(), line, msg: format!("row {} does not match the dataset", row.index) });
        }
        match row.split.as_str() {
            "train" => train.push(row.index),
            "validation" => validation.push(row.index),
            "test" => test.push(row.index),
            other => return Err(DataError::Csv { path: path.to_path_buf(), line, msg: format!("unknown split {other:?}") }),
        }
        rows.push((line, row));
    }
    let mut known: Vec<usize> = rows.iter().filter(|(_, r)| r.split == "train").map(|(_, r)| r.original_label).collect();
    known.sort_unstable();
    known.dedup();
    let split = OpenSetSplit::build(ds, seed, known, train, validation, test, scale)?;
    let c = split.num_known();
    for (line, row) in &rows {
        let want = split.known_class_ids.iter().position(|&k| k == row.original_label).unwrap_or(c);
        if want != row.mapped_label {
            return Err(DataError::Csv { path: path.to_path_buf(), line: *line, msg: "mapped label disagrees with known classes".into() });
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gaussian_blobs;
    use std::collections::BTreeSet;

    fn ten_class() -> Dataset {
        gaussian_blobs(10, 100, 4, 3.0, 1)
    }

    #[test]
    fn mnist_like_protocol() {
        let ds = ten_class();
        let s = make_open_split(&ds, &SplitOptions::default(), 7).unwrap();
        assert_eq!(s.known_class_ids.len(), 6);
        assert_eq!(s.unknown_class_ids.len(), 4);
        let train_labels: BTreeSet<usize> = s.train.labels.iter().copied().collect();
        assert_eq!(train_labels, (0..6).collect());
        assert!(s.train.original_labels.iter().all(|l| s.known_class_ids.contains(l)));
        let unknown_test: Vec<_> = s.test.original_labels.iter().zip(&s.test.labels).filter(|(o, _)| s.unknown_class_ids.contains(o)).collect();
        assert_eq!(unknown_test.len(), 400);
        assert!(unknown_test.iter().all(|(_, &m)| m == 6));
        assert_eq!(s.class_names.last().unwrap(), "unknown");
    }

    #[test]
    fn train_fraction_near_three_quarters() {
        let ds = gaussian_blobs(8, 125, 3, 2.0, 2);
        let s = make_open_split(&ds, &SplitOptions::default(), 3).unwrap();
        for c in 0..6 {
            let tr = s.train.labels.iter().filter(|&&l| l == c).count() as f64;
            let te = s.test.labels.iter().filter(|&&l| l == c).count() as f64;
            let f = tr / (tr + te);
            assert!((0.70..=0.80).contains(&f), "class {c}: {f}");
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let ds = ten_class();
        let a = make_open_split(&ds, &SplitOptions::default(), 11).unwrap();
        let b = make_open_split(&ds, &SplitOptions::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = make_open_split(&ds, &SplitOptions::default(), 12).unwrap();
        assert_ne!(a.train.indices, c.train.indices);
        let tr: BTreeSet<_> = a.train.indices.iter().collect();
        assert!(a.test.indices.iter().all(|i| !tr.contains(i)));
        assert_eq!(a.train.len() + a.test.len(), ds.len());
        let ids: BTreeSet<_> = a.known_class_ids.iter().chain(&a.unknown_class_ids).copied().collect();
        assert_eq!(ids, (0..10).collect());
    }

    #[test]
    fn validation_carved_from_train() {
        let ds = ten_class();
        let opts = SplitOptions { validation_fraction: 0.2, ..Default::default() };
        let s = make_open_split(&ds, &opts, 5).unwrap();
        assert_eq!(s.validation.len(), 6 * 15);
        assert_eq!(s.train.len(), 6 * 60);
        assert!(s.validation.labels.iter().all(|&l| l < 6));
    }

    #[test]
    fn too_few_classes() {
        let ds = gaussian_blobs(6, 10, 2, 1.0, 0);
        assert!(matches!(make_open_split(&ds, &SplitOptions::default(), 0), Err(DataError::TooFewClasses { classes: 6, known: 6 })));
    }

    #[test]
    fn scaling_uses_training_statistics_only() {
        let ds = ten_class();
        let opts = SplitOptions { scale: true, ..Default::default() };
        let s = make_open_split(&ds, &opts, 4).unwrap();
        let raw = make_open_split(&ds, &SplitOptions::default(), 4).unwrap();
        assert_eq!(s.scaler.as_ref().unwrap(), &MinMaxScaler::fit(&raw.train.x).unwrap());
        assert!(s.train.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_roundtrip() {
        let ds = ten_class();
        let opts = SplitOptions { validation_fraction: 0.1, ..Default::default() };
        let s = make_open_split(&ds, &opts, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.csv");
        write_manifest(&s, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("split,index,original_label,mapped_label\n"));
        assert_eq!(read_manifest(&ds, &p, 9, false).unwrap(), s);
    }
}
