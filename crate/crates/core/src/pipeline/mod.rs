//! Training loop and centroid-based open-set inference.
//!
//! Training draws stratified mini-batches and applies [`combined_step`] for a
//! fixed number of iterations. Afterwards [`fit_outlier_model`] places one
//! centroid per known class at the mean training representation and sets
//! the outlier threshold at a high quantile of the training scores. A test
//! sample farther than the threshold from every centroid is labeled unknown.

mod outlier;
mod sampler;

pub use outlier::{fit_outlier_model, predict, quantile, write_predictions, OutlierModel, Prediction, EMBED_CHUNK};
pub use sampler::StratifiedSampler;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::OpenSetSplit;
use crate::error::{Error, Result};
use crate::losses::{combined_step, BaseLoss, LossConfig};
use crate::nn::{Network, NetworkSpec, Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    /// Trunk and Z layer. A classification head is attached for
    /// cross-entropy and dropped otherwise.
    pub network: NetworkSpec,
    pub contamination: f64,
}

impl TrainConfig {
    pub const DEFAULT_ITERATIONS: usize = 5000;
    pub const DEFAULT_BATCH_SIZE: usize = 128;
    pub const DEFAULT_CONTAMINATION: f64 = 0.01;

    pub fn new(network: NetworkSpec, loss: LossConfig) -> Self {
        Self {
            iterations: Self::DEFAULT_ITERATIONS,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            seed: 0,
            learning_rate: 0.001,
            optimizer: OptimizerKind::default(),
            loss,
            network,
            contamination: Self::DEFAULT_CONTAMINATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.contamination > 0.0 && self.contamination < 0.5) {
            return Err(Error::Config(format!("contamination ratio {} outside (0, 0.5)", self.contamination)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.loss.validate().map_err(Error::Config)?;
        self.network.validate()
    }

    /// Network spec with the head matching the loss and `num_classes`.
    pub fn network_for(&self, num_classes: usize) -> NetworkSpec {
        let head = (self.loss.base == BaseLoss::CrossEntropy).then_some(num_classes);
        self.network.clone().with_head(head)
    }
}

/// Loss values after one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub base_loss: f64,
    pub ext_loss: Option<f64>,
    /// Wall-clock seconds since training started.
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub seconds: f64,
    pub optimizer_steps: u64,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
        let err = |e: csv::Error| Error::Io(e.into());
        w.write_record(["iteration", "base_loss", "ext_loss", "elapsed_seconds"]).map_err(err)?;
        for r in &self.records {
            let ext = r.ext_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.iteration.to_string(), r.base_loss.to_string(), ext, format!("{:.6}", r.elapsed)]).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct Trained {
    pub network: Network,
    pub log: TrainLog,
}

/// Trains on the known classes of `split`.
pub fn train(split: &OpenSetSplit, cfg: &TrainConfig) -> Result<Trained> {
    train_on(&split.train.x, &split.train.labels, split.num_known(), cfg, |_| {})
}

/// Trains on `x` with labels in `[0, num_classes)`, calling `progress` after
/// every iteration. Identical inputs and seed give identical networks.
pub fn train_on(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&IterRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut net = Network::new(&cfg.network_for(num_classes), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler = StratifiedSampler::new(labels, num_classes, cfg.batch_size, 2)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let start = Instant::now();
    let mut log = TrainLog { records: Vec::with_capacity(cfg.iterations), ..Default::default() };
    for iteration in 1..=cfg.iterations {
        let idx = sampler.next_batch(&mut batch_rng);
        let xb = x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let out = combined_step(&mut net, &xb, &yb, &cfg.loss, &mut opt, &mut dropout_rng)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("iteration {iteration}: {msg}")),
                other => other,
            })?;
        let rec = IterRecord { iteration, base_loss: out.base_loss, ext_loss: out.ext_loss, elapsed: start.elapsed().as_secs_f64() };
        progress(&rec);
        log.records.push(rec);
    }
    log.seconds = start.elapsed().as_secs_f64();
    log.optimizer_steps = opt.steps();
    Ok(Trained { network: net, log })
}
