//! Config-driven experiment runs: splits, a training grid over losses,
//! extensions, split seeds and repeats, evaluation and timing benchmarks.
//!
//! All artifacts live under `output_dir`:
//!
//! ```text
//! splits/split-<seed>.csv
//! runs/<loss>-<extension>/split-<seed>/rep-<r>/
//!     network.ckpt  outlier.json  train_log.csv  predictions.csv  run.json
//! report.csv  aggregate.csv  significance.csv
//! ```

mod bench;
mod provenance;

pub use bench::{benchtime, BenchCell, BenchTable};
pub use provenance::{config_hash, Provenance};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, OpenSetSplit, SplitOptions};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, RunInfo};
use crate::losses::{BaseLoss, Extension, LossConfig, DEFAULT_MARGIN};
use crate::nn::{checkpoint, NetworkSpec, OptimizerKind};
use crate::pipeline::{self, OutlierModel, TrainConfig};

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// IDX image and label files, optionally gzip-compressed.
    Idx { images: PathBuf, labels: PathBuf },
    /// CIFAR-10 binary batches, converted to grayscale.
    Cifar10 { batches: Vec<PathBuf> },
    /// `label,f0,...` rows of `features` numeric columns.
    FeatureCsv { path: PathBuf, features: usize },
    /// Gaussian clusters, for smoke tests.
    Blobs { classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Name used in reports and for per-dataset defaults
    /// (`mnist`, `cifar10`, `mc`, `ag`).
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Expected sha256 of each input file, in source order.
    #[serde(default)]
    pub sha256: Vec<String>,
    /// Min-max scale features with statistics of the training portion.
    #[serde(default)]
    pub scale: bool,
}

/// A preset name or an inline layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Preset(String),
    Inline(NetworkSpec),
}

impl NetworkChoice {
    pub fn resolve(&self) -> Result<NetworkSpec> {
        match self {
            NetworkChoice::Preset(name) => NetworkSpec::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown network preset {name:?}; expected mnist, cifar10, mc, ag or mnist-mlp"))),
            NetworkChoice::Inline(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_contamination")]
    pub contamination: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_iterations() -> usize {
    TrainConfig::DEFAULT_ITERATIONS
}
fn default_batch_size() -> usize {
    TrainConfig::DEFAULT_BATCH_SIZE
}
fn default_contamination() -> f64 {
    TrainConfig::DEFAULT_CONTAMINATION
}
fn default_margin() -> f64 {
    DEFAULT_MARGIN
}
fn default_n_known() -> usize {
    6
}
fn default_repeats() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_n_known")]
    pub n_known: usize,
    pub split_seeds: Vec<u64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub network: NetworkChoice,
    pub losses: Vec<BaseLoss>,
    pub extensions: Vec<Extension>,
    /// Extension weight for ii and triplet. Unset means the per-dataset default.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub train: TrainSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for one of the published settings (`mnist`, `cifar10`, `mc`,
    /// `ag`) or the CPU-sized `mnist-mlp`. Dataset paths still need filling in.
    pub fn preset(name: &str) -> Result<Self> {
        let network = NetworkChoice::Preset(name.to_string());
        network.resolve()?;
        let (dataset, source, scale) = match name {
            "mnist" | "mnist-mlp" => (
                "mnist",
                DatasetSource::Idx {
                    images: "data/mnist-10k/images-idx3-ubyte.gz".into(),
                    labels: "data/mnist-10k/labels-idx1-ubyte.gz".into(),
                },
                false,
            ),
            "cifar10" => (
                "cifar10",
                DatasetSource::Cifar10 { batches: (1..=5).map(|i| PathBuf::from(format!("data/cifar-10/data_batch_{i}.bin"))).collect() },
                false,
            ),
            "mc" => ("mc", DatasetSource::FeatureCsv { path: "data/mc.csv".into(), features: 63 * 63 }, true),
            _ => ("ag", DatasetSource::FeatureCsv { path: "data/ag.csv".into(), features: 1453 }, true),
        };
        Ok(Self {
            dataset: DatasetConfig { name: dataset.into(), source, sha256: Vec::new(), scale },
            n_known: 6,
            split_seeds: vec![0],
            repeats: 1,
            network,
            losses: BaseLoss::ALL.to_vec(),
            extensions: vec![Extension::None, Extension::Mmf, Extension::MaxF, Extension::MinF],
            lambda: None,
            train: TrainSettings {
                iterations: default_iterations(),
                batch_size: default_batch_size(),
                learning_rate: if dataset == "ag" { 0.1 } else { 0.001 },
                optimizer: OptimizerKind::default(),
                contamination: default_contamination(),
                margin: DEFAULT_MARGIN,
            },
            output_dir: PathBuf::from(format!("runs/{name}")),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_seeds.is_empty() {
            return bad("split_seeds is empty".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.losses.is_empty() || self.extensions.is_empty() {
            return bad("losses and extensions must each name at least one entry".into());
        }
        if self.n_known < 2 {
            return bad(format!("n_known = {} leaves nothing to separate", self.n_known));
        }
        for run in self.grid() {
            self.train_config(run.loss, run.extension, 0)?.validate()?;
        }
        Ok(())
    }

    pub fn loss_config(&self, base: BaseLoss, extension: Extension) -> LossConfig {
        let lambda = match base.combination() {
            crate::losses::Combination::Alternating => 1.0,
            _ => self.lambda.unwrap_or_else(|| LossConfig::default_lambda(&self.dataset.name, base)),
        };
        LossConfig { margin: self.train.margin, ..LossConfig::new(base, extension, lambda) }
    }

    pub fn train_config(&self, base: BaseLoss, extension: Extension, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            seed,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            loss: self.loss_config(base, extension),
            network: self.network.resolve()?,
            contamination: self.train.contamination,
        })
    }

    /// Every (loss, extension, split seed, repeat) combination, in that
    /// nesting order.
    pub fn grid(&self) -> Vec<RunKey> {
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &extension in &self.extensions {
                for &split_seed in &self.split_seeds {
                    for repeat in 0..self.repeats {
                        out.push(RunKey { loss, extension, split_seed, repeat });
                    }
                }
            }
        }
        out
    }

    pub fn split_path(&self, seed: u64) -> PathBuf {
        self.output_dir.join("splits").join(format!("split-{seed}.csv"))
    }

    pub fn run_dir(&self, key: &RunKey) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(format!("{}-{}", key.loss.name(), key.extension.name()))
            .join(format!("split-{}", key.split_seed))
            .join(format!("rep-{}", key.repeat))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub loss: BaseLoss,
    pub extension: Extension,
    pub split_seed: u64,
    pub repeat: usize,
}

impl RunKey {
    /// Network and batch seed. Shared by every loss and extension so paired
    /// runs start from the same initialization.
    pub fn training_seed(&self) -> u64 {
        self.split_seed.wrapping_mul(1_000_003).wrapping_add(self.repeat as u64)
    }

    pub fn label(&self) -> String {
        format!("{}+{} split {} repeat {}", self.loss, self.extension, self.split_seed, self.repeat)
    }
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let files: Vec<&Path> = match &cfg.source {
        DatasetSource::Idx { images, labels } => vec![images, labels],
        DatasetSource::Cifar10 { batches } => batches.iter().map(PathBuf::as_path).collect(),
        DatasetSource::FeatureCsv { path, .. } => vec![path],
        DatasetSource::Blobs { .. } => vec![],
    };
    if !cfg.sha256.is_empty() {
        if cfg.sha256.len() != files.len() {
            return Err(Error::Config(format!("{} checksums given for {} dataset files", cfg.sha256.len(), files.len())));
        }
        for (f, h) in files.iter().zip(&cfg.sha256) {
            data::verify_sha256(f, h)?;
        }
    }
    Ok(match &cfg.source {
        DatasetSource::Idx { images, labels } => data::load_idx(images, labels)?,
        DatasetSource::Cifar10 { batches } => data::load_cifar_gray(batches)?,
        DatasetSource::FeatureCsv { path, features } => data::load_feature_csv(path, *features)?,
        DatasetSource::Blobs { classes, per_class, dim, separation, seed } => {
            data::synthetic::gaussian_blobs(*classes, *per_class, *dim, *separation, *seed)
        }
    })
}

/// Writes one split manifest per split seed. Rerunning with the same
/// config rewrites identical files.
pub fn write_splits(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<PathBuf>> {
    let opts = SplitOptions { n_known: cfg.n_known, scale: cfg.dataset.scale, ..Default::default() };
    std::fs::create_dir_all(cfg.output_dir.join("splits"))?;
    cfg.split_seeds
        .iter()
        .map(|&seed| {
            let split = data::make_open_split(ds, &opts, seed)?;
            let path = cfg.split_path(seed);
            data::write_manifest(&split, &path)?;
            Ok(path)
        })
        .collect()
}

pub fn read_split(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<OpenSetSplit> {
    let path = cfg.split_path(seed);
    if !path.exists() {
        return Err(Error::Config(format!("split manifest {} is missing; run `split` first", path.display())));
    }
    Ok(data::read_manifest(ds, &path, seed, cfg.dataset.scale)?)
}

/// Summary stored as `run.json` next to the run's other artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RunKey,
    pub training_seed: u64,
    pub loss: LossConfig,
    pub train_seconds: f64,
    pub optimizer_steps: u64,
    pub iterations: usize,
    pub final_base_loss: f64,
    pub final_ext_loss: Option<f64>,
}

/// Trains one grid cell, fits the outlier model and writes every artifact
/// of the run, including test-set predictions.
pub fn train_run(
    cfg: &ExperimentConfig,
    split: &OpenSetSplit,
    key: RunKey,
    progress: impl FnMut(&pipeline::IterRecord),
) -> Result<RunRecord> {
    let tc = cfg.train_config(key.loss, key.extension, key.training_seed())?;
    let trained = pipeline::train_on(&split.train.x, &split.train.labels, split.num_known(), &tc, progress)?;
    let dir = cfg.run_dir(&key);
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(&trained.network, dir.join("network.ckpt"))?;
    let model = pipeline::fit_outlier_model(&trained.network, &split.train.x, &split.train.labels, split.num_known(), tc.contamination)?;
    model.save(dir.join("outlier.json"))?;
    trained.log.write_csv(dir.join("train_log.csv"))?;
    let preds = pipeline::predict(&model, &trained.network, &split.test.x)?;
    pipeline::write_predictions(dir.join("predictions.csv"), &split.test.indices, &split.test.labels, &preds)?;
    let last = trained.log.records.last();
    let record = RunRecord {
        key,
        training_seed: tc.seed,
        loss: tc.loss,
        train_seconds: trained.log.seconds,
        optimizer_steps: trained.log.optimizer_steps,
        iterations: tc.iterations,
        final_base_loss: last.map_or(f64::NAN, |r| r.base_loss),
        final_ext_loss: last.and_then(|r| r.ext_loss),
    };
    write_json(dir.join("run.json"), &record)?;
    Ok(record)
}

pub fn read_run_record(cfg: &ExperimentConfig, key: &RunKey) -> Result<RunRecord> {
    let path = cfg.run_dir(key).join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Per-run reports for the whole grid. Fails listing every run whose
/// artifacts are missing.
pub fn evaluate_runs(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<EvalReport>> {
    let grid = cfg.grid();
    let missing: Vec<String> = grid
        .iter()
        .filter(|k| {
            let d = cfg.run_dir(k);
            !(d.join("network.ckpt").exists() && d.join("outlier.json").exists() && d.join("run.json").exists())
        })
        .map(RunKey::label)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} run(s) missing; train them first: {}", missing.len(), missing.join(", "))));
    }
    let mut reports = Vec::with_capacity(grid.len());
    let mut splits: Vec<(u64, OpenSetSplit)> = Vec::new();
    for key in grid {
        if !splits.iter().any(|(s, _)| *s == key.split_seed) {
            splits.push((key.split_seed, read_split(cfg, ds, key.split_seed)?));
        }
        let split = &splits.iter().find(|(s, _)| *s == key.split_seed).expect("loaded above").1;
        let dir = cfg.run_dir(&key);
        let net = checkpoint::load(dir.join("network.ckpt"))?;
        let model = OutlierModel::load(dir.join("outlier.json"))?;
        let record = read_run_record(cfg, &key)?;
        let preds = pipeline::predict(&model, &net, &split.test.x)?;
        let info = RunInfo {
            dataset: cfg.dataset.name.clone(),
            split_seed: key.split_seed,
            repeat: key.repeat,
            loss: key.loss.name().into(),
            extension: key.extension.name().into(),
            lambda: record.loss.lambda,
            train_seconds: record.train_seconds,
        };
        reports.push(eval::evaluate(&preds, &split.test.labels, split.num_known(), info)?);
    }
    Ok(reports)
}

/// Writes `report.csv`, `aggregate.csv` and `significance.csv`.
pub fn write_eval_outputs(cfg: &ExperimentConfig, reports: &[EvalReport]) -> Result<[PathBuf; 3]> {
    let paths = ["report.csv", "aggregate.csv", "significance.csv"].map(|f| cfg.output_dir.join(f));
    eval::write_report_csv(&paths[0], reports)?;
    eval::write_aggregate_csv(&paths[1], &eval::aggregate(reports))?;
    eval::write_significance_csv(&paths[2], &eval::significance_table(reports))?;
    Ok(paths)
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests;
