use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{write_json, DatasetSource, ExperimentConfig};
use crate::data;
use crate::error::{Error, Result};

/// Hex sha256 of the config's canonical JSON form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    data::hex_digest(&json)
}

/// What a command ran on, enough to rerun it and get identical parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub split_seeds: Vec<u64>,
    /// `(path, sha256)` of every dataset input file.
    pub dataset_files: Vec<(PathBuf, String)>,
    pub crate_version: String,
    pub target: String,
    pub float: String,
    pub unix_time: u64,
}

impl Provenance {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let files: Vec<PathBuf> = match &cfg.dataset.source {
            DatasetSource::Idx { images, labels } => vec![images.clone(), labels.clone()],
            DatasetSource::Cifar10 { batches } => batches.clone(),
            DatasetSource::FeatureCsv { path, .. } => vec![path.clone()],
            DatasetSource::Blobs { .. } => Vec::new(),
        };
        let dataset_files = files
            .into_iter()
            .map(|p| {
                let h = data::sha256_file(&p)?;
                Ok((p, h))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            split_seeds: cfg.split_seeds.clone(),
            dataset_files,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            float: "f64".into(),
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    /// Writes `manifest-<command>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
