//! `mmf`: experiment runner for open set recognition with the MMF extension.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or
//! usage, 3 data or file errors, 4 numerical failure or failed gradient
//! check.

mod config;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mmf_osr::experiment::{self, ExperimentConfig, Provenance, RunKey};
use mmf_osr::gradcheck::{self, SuiteOptions};
use mmf_osr::losses::BaseLoss;
use mmf_osr::nn::checkpoint;
use mmf_osr::pipeline::OutlierModel;
use mmf_osr::{eval, Error};

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "mmf", version, about = "Open set recognition experiments with the min-max-feature loss extension")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write one open-split manifest per split seed.
    Split,
    /// Train every (loss, extension, split seed, repeat) run of the grid.
    Train {
        /// Only this split seed.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Only this repeat.
        #[arg(long)]
        repeat: Option<usize>,
        /// Print losses every N iterations (0 disables).
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
    /// Score trained runs and write report, aggregate and significance tables.
    Eval,
    /// Finite-difference check of every op, layer and loss.
    Gradcheck {
        /// Only cases whose name or group contains this text.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Print the results as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Training time of each loss with and without MMF on the first split.
    Benchtime {
        #[arg(long, default_value_t = 3)]
        bench_repeats: usize,
    },
    /// Write MAV, outlier-score and embedding CSVs for trained runs.
    ExportAnalysis,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
                Error::Numerical(_) | Error::Tensor(_) | Error::Loss(_) | Error::MissingGradients => 4,
                Error::Eval(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Gradcheck { filter, tolerance, json } = &cli.command {
        return gradcheck_cmd(filter.clone(), *tolerance, *json);
    }
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::Split => split(&cfg),
        Command::Train { split_seed, repeat, log_every } => train(&cfg, split_seed, repeat, log_every),
        Command::Eval => eval_cmd(&cfg),
        Command::Benchtime { bench_repeats } => benchtime(&cfg, bench_repeats),
        Command::ExportAnalysis => export(&cfg),
        Command::ShowConfig => {
            print!("{}", config::to_toml(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}

fn provenance(command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let path = Provenance::new(command, cfg)?.write(&cfg.output_dir)?;
    eprintln!("provenance: {}", path.display());
    Ok(())
}

fn split(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let ds = experiment::load_dataset(&cfg.dataset)?;
    for path in experiment::write_splits(cfg, &ds)? {
        println!("{}", path.display());
    }
    provenance("split", cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &ExperimentConfig, split_seed: Option<u64>, repeat: Option<usize>, log_every: usize) -> Result<ExitCode> {
    let ds = experiment::load_dataset(&cfg.dataset)?;
    provenance("train", cfg)?;
    let keys: Vec<RunKey> = cfg
        .grid()
        .into_iter()
        .filter(|k| split_seed.is_none_or(|s| s == k.split_seed) && repeat.is_none_or(|r| r == k.repeat))
        .collect();
    if keys.is_empty() {
        return Err(Error::Config("no run matches --split-seed/--repeat".into()).into());
    }
    let mut splits = Vec::new();
    for key in keys {
        if !splits.iter().any(|(s, _)| *s == key.split_seed) {
            splits.push((key.split_seed, experiment::read_split(cfg, &ds, key.split_seed)?));
        }
        let split = &splits.iter().find(|(s, _)| *s == key.split_seed).expect("loaded").1;
        let label = key.label();
        let record = experiment::train_run(cfg, split, key, |r| {
            if log_every > 0 && r.iteration % log_every == 0 {
                let ext = r.ext_loss.map(|v| format!(" ext {v:.5}")).unwrap_or_default();
                eprintln!("[{label}] iter {} base {:.5}{ext} ({:.1}s)", r.iteration, r.base_loss, r.elapsed);
            }
        })
        .with_context(|| format!("training {label}"))?;
        println!(
            "{label}: {:.2}s, {} optimizer steps, final base loss {:.5}",
            record.train_seconds, record.optimizer_steps, record.final_base_loss
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let ds = experiment::load_dataset(&cfg.dataset)?;
    let reports = experiment::evaluate_runs(cfg, &ds)?;
    let paths = experiment::write_eval_outputs(cfg, &reports)?;
    println!("{:<10} {:<6} {:>4} {:>9} {:>9} {:>8} {:>8} {:>8}", "loss", "ext", "runs", "auc", "auc@10%", "f1 known", "f1 unk", "f1 all");
    for r in eval::aggregate(&reports) {
        println!(
            "{:<10} {:<6} {:>4} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4}",
            r.loss, r.extension, r.runs, r.auc_full, r.auc_fpr10, r.f1_known, r.f1_unknown, r.f1_overall
        );
    }
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    provenance("eval", cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(filter: Option<String>, tolerance: f64, json: bool) -> Result<ExitCode> {
    let result = gradcheck::suite(&SuiteOptions { tolerance, filter, ..Default::default() });
    if json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        for c in &result.cases {
            let status = if c.passed { "ok" } else { "FAIL" };
            let note = c.error.as_deref().unwrap_or("");
            println!("{:<8} {:<34} {:>11.3e} {:>6} {status} {note}", c.group, c.name, c.max_rel_err, c.coords_checked);
        }
        println!("{} cases, max rel err {:.3e}, {:.1}s", result.cases.len(), result.max_rel_err(), result.seconds);
    }
    Ok(if result.passed() { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

fn benchtime(cfg: &ExperimentConfig, repeats: usize) -> Result<ExitCode> {
    let ds = experiment::load_dataset(&cfg.dataset)?;
    let split = experiment::read_split(cfg, &ds, cfg.split_seeds[0])?;
    let table = experiment::benchtime(&split.train.x, &split.train.labels, split.num_known(), &BaseLoss::ALL, repeats, |loss, ext| {
        cfg.train_config(loss, ext, 0)
    })?;
    print!("{}", table.render());
    let path = cfg.output_dir.join("benchtime.csv");
    table.write_csv(&path)?;
    eprintln!("wrote {}", path.display());
    provenance("benchtime", cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn export(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let ds = experiment::load_dataset(&cfg.dataset)?;
    for key in cfg.grid() {
        let dir = cfg.run_dir(&key);
        if !dir.join("network.ckpt").exists() {
            return Err(Error::Config(format!("{} is not trained ({} missing)", key.label(), dir.display())).into());
        }
        let split = experiment::read_split(cfg, &ds, key.split_seed)?;
        let net = checkpoint::load(dir.join("network.ckpt"))?;
        let model = OutlierModel::load(dir.join("outlier.json"))?;
        let files = eval::export_analysis(&net, &model, &split.test, &split.class_names, dir.join("analysis"))?;
        println!("{}: {}", key.label(), files.mav.parent().unwrap_or(&dir).display());
    }
    provenance("export-analysis", cfg)?;
    Ok(ExitCode::SUCCESS)
}
