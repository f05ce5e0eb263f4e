//! Small generated datasets for tests and smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::Dataset;
use crate::tensor::Tensor;

/// `classes` isotropic unit-variance Gaussian clusters in `dim` dimensions.
/// Centers are drawn uniformly on a sphere of radius `separation`.
pub fn gaussian_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * separation / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        labels.push(c);
        data.extend(centers[c].iter().map(|m| m + normal.sample(&mut rng)));
    }
    let x = Tensor::new(vec![labels.len(), dim], data).expect("blob shape");
    Dataset::new(x, labels, (0..classes).map(|c| format!("class{c}")).collect()).expect("valid blobs")
}

/// Count-valued features in the style of call-graph statistics: each class
/// has its own sparse profile of Poisson rates. 3969 features are laid out
/// as `[1, 63, 63]` matrices.
pub fn call_graph_like(classes: usize, per_class: usize, feature_count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..feature_count).map(|_| if rng.gen::<f64>() < 0.2 { rng.gen_range(0.5..6.0) } else { 0.05 }).collect())
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * feature_count);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        labels.push(c);
        data.extend(profiles[c].iter().map(|&rate| Poisson::new(rate).expect("positive rate").sample(&mut rng)));
    }
    let n = labels.len();
    let shape = if feature_count == 63 * 63 { vec![n, 1, 63, 63] } else { vec![n, feature_count] };
    let x = Tensor::new(shape, data).expect("feature shape");
    Dataset::new(x, labels, (0..classes).map(|c| format!("family{c}")).collect()).expect("valid features")
}
