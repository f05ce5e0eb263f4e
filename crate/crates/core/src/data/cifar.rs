use std::path::Path;

use super::{read_maybe_gzip, DataError, Dataset, Result};
use crate::tensor::Tensor;

/// Luma weights applied to (R, G, B).
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;

const NAMES: [&str; 10] = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

/// Loads CIFAR-10 binary batches (one label byte, then 1024 R, 1024 G and
/// 1024 B bytes per record) and converts them to grayscale in `[0, 1]`,
/// shape `[N, 1, 32, 32]`.
pub fn load_cifar_gray<P: AsRef<Path>>(batches: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let path = path.as_ref();
        let bytes = read_maybe_gzip(path)?;
        if bytes.len() % RECORD != 0 {
            return Err(DataError::RecordSize { path: path.to_path_buf(), len: bytes.len(), record: RECORD });
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label >= NAMES.len() {
                return Err(DataError::Invalid(format!("{}: label byte {label} outside 0..10", path.display())));
            }
            labels.push(label);
            let (r, g, b) = (&rec[1..1 + PLANE], &rec[1 + PLANE..1 + 2 * PLANE], &rec[1 + 2 * PLANE..]);
            data.extend((0..PLANE).map(|i| gray(r[i], g[i], b[i])));
        }
    }
    let n = labels.len();
    let features = Tensor::new(vec![n, 1, SIDE, SIDE], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, NAMES.iter().map(|s| s.to_string()).collect())
}

fn gray(r: u8, g: u8, b: u8) -> f64 {
    (GRAY_WEIGHTS[0] * r as f64 + GRAY_WEIGHTS[1] * g as f64 + GRAY_WEIGHTS[2] * b as f64) / 255.0
}
