use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mmf_osr::experiment::{ExperimentConfig, NetworkChoice};
use mmf_osr::losses::{BaseLoss, Extension};

/// Config source and per-field overrides shared by every subcommand.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML experiment config. `mmf show-config --preset mnist` prints a template.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Start from a preset instead of a file: mnist, cifar10, mc, ag, mnist-mlp.
    #[arg(long, global = true, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Network preset name, replacing the configured network.
    #[arg(long, global = true)]
    pub network: Option<String>,
    /// Comma-separated base losses: ce, ii, triplet.
    #[arg(long, global = true, value_delimiter = ',')]
    pub loss: Vec<BaseLoss>,
    /// Comma-separated extensions: none, mmf, maxf, minf, mmf2, maxf2.
    #[arg(long = "ext", global = true, value_delimiter = ',')]
    pub extensions: Vec<Extension>,
    /// Extension weight for ii and triplet.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Comma-separated split seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr", global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub contamination: Option<f64>,
    #[arg(long, global = true)]
    pub n_known: Option<usize>,
}

impl ConfigArgs {
    /// Loads the file or preset, then applies every flag that was given.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_toml(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => bail!(mmf_osr::Error::Config("pass --config FILE or --preset NAME".into())),
        };
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(n) = &self.network {
            cfg.network = NetworkChoice::Preset(n.clone());
        }
        if !self.loss.is_empty() {
            cfg.losses = self.loss.clone();
        }
        if !self.extensions.is_empty() {
            cfg.extensions = self.extensions.clone();
        }
        if self.lambda.is_some() {
            cfg.lambda = self.lambda;
        }
        if !self.seeds.is_empty() {
            cfg.split_seeds = self.seeds.clone();
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(i) = self.iterations {
            cfg.train.iterations = i;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(c) = self.contamination {
            cfg.train.contamination = c;
        }
        if let Some(k) = self.n_known {
            cfg.n_known = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_toml(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| mmf_osr::Error::Config(format!("{}: {e}", path.display())).into())
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).context("serializing config")
}
