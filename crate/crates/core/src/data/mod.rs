//! Dataset loaders, feature scaling and open-set splits.

mod cifar;
mod features;
mod idx;
mod split;
pub mod synthetic;

pub use cifar::{load_cifar_gray, GRAY_WEIGHTS};
pub use features::{load_feature_csv, load_feature_csv_with_classes, write_feature_csv, MinMaxScaler};
pub use idx::{load_idx, write_idx};
pub use split::{make_open_split, read_manifest, write_manifest, OpenSetSplit, SplitOptions, Subset};

use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    RecordSize { path: PathBuf, len: usize, record: usize },
    #[error("{path}, line {line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },
    #[error("{path}, line {line}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, line: u64, label: String },
    #[error("dataset has {classes} classes; an open split with {known} known classes needs more")]
    TooFewClasses { classes: usize, known: usize },
    #[error("{path}: sha256 {actual} does not match expected {expected}")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Labeled samples with dense labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, feature_shape...]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub feature_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let shape = features.shape();
        if shape.first() != Some(&labels.len()) {
            return Err(DataError::Invalid(format!("{} labels for features of shape {shape:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!("label {bad} outside [0, {})", class_names.len())));
        }
        if !features.all_finite() {
            return Err(DataError::Invalid("features contain NaN or infinite values".into()));
        }
        let feature_shape = shape[1..].to_vec();
        Ok(Self { features, labels, class_names, feature_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            feature_shape: self.feature_shape.clone(),
        }
    }
}

/// Reads a file, transparently inflating gzip content.
pub(crate) fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Hex sha256 of a file's bytes.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    Ok(hex_digest(&bytes))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fails unless the file's sha256 equals `expected` (hex, case-insensitive).
pub fn verify_sha256(path: impl AsRef<Path>, expected: &str) -> Result<()> {
    let path = path.as_ref();
    let actual = sha256_file(path)?;
    if actual.eq_ignore_ascii_case(expected.trim()) {
        Ok(())
    } else {
        Err(DataError::Checksum { path: path.to_path_buf(), expected: expected.to_string(), actual })
    }
}
