use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Rows per eval-mode forward when embedding a whole dataset.
pub const EMBED_CHUNK: usize = 256;

/// Class centroids in representation space and the unknown-class threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierModel {
    /// One row per known class.
    pub centroids: Vec<Vec<f64>>,
    pub threshold: f64,
    pub contamination: f64,
    /// Distance used for scores; always `"euclidean"`.
    pub metric: String,
    /// Outlier scores of the training samples the threshold came from.
    pub training_scores: Vec<f64>,
}

/// Open-set decision for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Distance to the nearest centroid.
    pub outlier_score: f64,
    /// Nearest centroid, or `C` when the score exceeds the threshold.
    pub label: usize,
    pub nearest: usize,
}

/// `q`-quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

impl OutlierModel {
    /// Centroids are per-class means of `z`; the threshold is the
    /// `1 - contamination` quantile of the training scores.
    pub fn fit(z: &Tensor, labels: &[usize], num_classes: usize, contamination: f64) -> Result<Self> {
        if !(contamination > 0.0 && contamination < 0.5) {
            return Err(Error::Config(format!("contamination ratio {contamination} outside (0, 0.5)")));
        }
        let n = labels.len();
        if n == 0 || z.shape().len() != 2 || z.shape()[0] != n {
            return Err(Error::Config(format!("{} labels for representations of shape {:?}", n, z.shape())));
        }
        let f = z.shape()[1];
        let mut sums = vec![vec![0.0; f]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (row, &y) in z.rows().zip(labels) {
            if y >= num_classes {
                return Err(Error::Config(format!("label {y} outside [0, {num_classes})")));
            }
            counts[y] += 1;
            sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Config(format!("known class {c} has no training samples")));
        }
        let centroids: Vec<Vec<f64>> =
            sums.into_iter().zip(&counts).map(|(s, &k)| s.into_iter().map(|v| v / k as f64).collect()).collect();
        let mut model =
            Self { centroids, threshold: 0.0, contamination, metric: "euclidean".into(), training_scores: Vec::new() };
        model.training_scores = z.rows().map(|r| model.nearest(r).1).collect();
        model.threshold = quantile(&model.training_scores, 1.0 - contamination);
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid and its distance; ties go to the lowest class id.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, m) in self.centroids.iter().enumerate() {
            let d: f64 = m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn predict_one(&self, z: &[f64]) -> Prediction {
        let (nearest, score) = self.nearest(z);
        let label = if score > self.threshold { self.num_classes() } else { nearest };
        Prediction { outlier_score: score, label, nearest }
    }

    /// Decisions for every row of `[N, F]` representations.
    pub fn predict(&self, z: &Tensor) -> Vec<Prediction> {
        z.rows().map(|r| self.predict_one(r)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("outlier model: {e}")))
    }
}

/// Fits the outlier model on eval-mode representations of the training set.
pub fn fit_outlier_model(net: &Network, x: &Tensor, labels: &[usize], num_classes: usize, contamination: f64) -> Result<OutlierModel> {
    let z = net.embed(x, EMBED_CHUNK)?;
    OutlierModel::fit(&z, labels, num_classes, contamination)
}

pub fn predict(model: &OutlierModel, net: &Network, x: &Tensor) -> Result<Vec<Prediction>> {
    Ok(model.predict(&net.embed(x, EMBED_CHUNK)?))
}

/// Writes `index,true_label,pred_label,outlier_score` rows.
pub fn write_predictions(path: impl AsRef<Path>, indices: &[usize], truth: &[usize], preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(["index", "true_label", "pred_label", "outlier_score"]).map_err(csv_err)?;
    for ((i, t), p) in indices.iter().zip(truth).zip(preds) {
        w.write_record([i.to_string(), t.to_string(), p.label.to_string(), format!("{:.17e}", p.outlier_score)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_quantile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = q * (s.len() as f64 - 1.0);
        let (i, frac) = (pos as usize, pos - pos.floor());
        if i + 1 < s.len() {
            s[i] * (1.0 - frac) + s[i + 1] * frac
        } else {
            s[i]
        }
    }

    #[test]
    fn one_to_hundred_percentile() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.99) - 99.01).abs() < 1e-12);
        assert!((quantile(&v, 0.99) - oracle_quantile(&v, 0.99)).abs() < 1e-12);
        assert_eq!(quantile(&v, 0.5), 50.5);
    }

    #[test]
    fn threshold_from_scores_one_to_hundred() {
        // points on a line at distance 1..100 from a single centroid at 0 and
        // its mirror, so the class mean stays at the origin
        let rows: Vec<[f64; 1]> = (1..=100).flat_map(|k| [[k as f64], [-(k as f64)]]).collect();
        let z = Tensor::from_rows(&rows).unwrap();
        let m = OutlierModel::fit(&z, &vec![0; 200], 1, 0.01).unwrap();
        let mut scores: Vec<f64> = (1..=100).flat_map(|k| [k as f64; 2]).collect();
        scores.sort_by(f64::total_cmp);
        assert!((m.threshold - oracle_quantile(&scores, 0.99)).abs() < 1e-12);
    }

    #[test]
    fn identical_representations_threshold_zero() {
        let z = Tensor::full(vec![10, 3], 0.7);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let m = OutlierModel::fit(&z, &labels, 2, 0.01).unwrap();
        assert_eq!(m.threshold, 0.0);
    }

    #[test]
    fn median_at_half_contamination() {
        let m = quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5);
        assert_eq!(m, 3.0);
        let z = Tensor::from_rows(&[[0.0], [2.0], [0.0], [-2.0]]).unwrap();
        assert!(OutlierModel::fit(&z, &[0, 0, 0, 0], 1, 0.5).is_err());
    }

    fn model(centroids: Vec<Vec<f64>>, threshold: f64) -> OutlierModel {
        OutlierModel { centroids, threshold, contamination: 0.01, metric: "euclidean".into(), training_scores: vec![] }
    }

    #[test]
    fn exact_centroid_and_threshold_rule() {
        let m = model(vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]], 1.0);
        let p = m.predict_one(&[0.0, 5.0]);
        assert_eq!((p.label, p.nearest, p.outlier_score), (2, 2, 0.0));
        let p = m.predict_one(&[0.0, 6.5]);
        assert_eq!((p.label, p.nearest), (3, 2));
        let p = m.predict_one(&[0.0, 6.0]);
        assert_eq!(p.label, 2, "score equal to the threshold stays known");
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = model(vec![vec![1.0], vec![-1.0]], 10.0);
        assert_eq!(m.predict_one(&[0.0]).nearest, 0);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let centroids: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let m = model(centroids.clone(), 2.0);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut best = (usize::MAX, f64::INFINITY);
            for (c, row) in centroids.iter().enumerate() {
                let d = row.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d < best.1 {
                    best = (c, d);
                }
            }
            let p = m.predict_one(&q);
            assert_eq!(p.nearest, best.0);
            assert!((p.outlier_score - best.1).abs() < 1e-12);
            assert_eq!(p.label == 6, p.outlier_score > 2.0);
        }
    }

    proptest! {
        #[test]
        fn training_exceedance_bounded(seed in any::<u64>(), n in 5usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::uniform(vec![n, 3], -1.0, 1.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let m = OutlierModel::fit(&z, &labels, 3, 0.01).unwrap();
            let above = m.predict(&z).iter().filter(|p| p.label == 3).count() as f64;
            prop_assert!(above / n as f64 <= 0.01 + 1.0 / n as f64);
            prop_assert!(m.threshold >= 0.0);
        }

        #[test]
        fn scaling_is_consistent(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cents: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = model(cents.clone(), 1.0).predict_one(&q);
            let scaled: Vec<Vec<f64>> = cents.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            let b = model(scaled, 1.0).predict_one(&qs);
            prop_assert_eq!(a.nearest, b.nearest);
            prop_assert!((b.outlier_score - c * a.outlier_score).abs() < 1e-9);
        }

        #[test]
        fn fit_ignores_sample_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::uniform(vec![30, 2], -1.0, 1.0, &mut rng);
            let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
            let perm: Vec<usize> = (0..30).rev().collect();
            let a = OutlierModel::fit(&z, &labels, 3, 0.01).unwrap();
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let b = OutlierModel::fit(&z.select_rows(&perm), &lp, 3, 0.01).unwrap();
            prop_assert!((a.threshold - b.threshold).abs() < 1e-12);
            for (x, y) in a.centroids.iter().flatten().zip(b.centroids.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(vec![vec![0.1, 0.2]], 0.3);
        let p = dir.path().join("outlier.json");
        m.save(&p).unwrap();
        assert_eq!(OutlierModel::load(&p).unwrap(), m);
    }
}
