//! Command-line driver: argument parsing, config resolution and dispatch.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fundus_core::Error;

use crate::config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "fundus", version, about = "Cataract vs normal fundus classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fundus dataset with ODIR-style metadata
    Synth(Common),
    /// Ingest metadata, filter, pair and split; write manifests
    PrepareData(Common),
    /// Train a single-eye classifier
    Train(Common),
    /// Distill a trained teacher into a student
    Distill(Common),
    /// Train the dual-eye Siamese classifier
    TrainDual(Common),
    /// Metrics and ROC curves for checkpoints
    Evaluate(Common),
    /// Grad-CAM overlays and heatmap grids
    Explain(Common),
    /// Full fine-tune vs frozen backbone ablation
    Benchmark(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Replace artifacts of a previous run of the same subcommand
    #[arg(long)]
    pub overwrite: bool,
    /// Override a config leaf, e.g. `--set train.max_epochs=10`
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    pub sets: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PrepareData(_) => "prepare-data",
            Command::Train(_) => "train",
            Command::Distill(_) => "distill",
            Command::TrainDual(_) => "train-dual",
            Command::Evaluate(_) => "evaluate",
            Command::Explain(_) => "explain",
            Command::Benchmark(_) => "benchmark",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::PrepareData(c)
            | Command::Train(c)
            | Command::Distill(c)
            | Command::TrainDual(c)
            | Command::Evaluate(c)
            | Command::Explain(c)
            | Command::Benchmark(c) => c,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn category(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::MissingColumn { .. } | Error::Csv(_) => "schema",
        Error::Stratification { .. } => "stratification",
        Error::Parameter(_) | Error::Config(_) | Error::UnknownBackbone(_) => "config",
        Error::Decode { .. } => "decode",
        Error::PretrainedUnavailable { .. } => "pretrained",
        Error::Construction(_) => "construction",
        Error::Shape(_) => "shape",
        Error::Numeric(_) => "numeric",
        Error::Metric(_) => "metric",
        Error::Divergence { .. } => "divergence",
        Error::Checkpoint(_) => "checkpoint",
        Error::UnsupportedLayer { .. } => "unsupported_layer",
        Error::State(_) => "state",
        Error::Input(_) => "input",
    }
}

pub fn snapshot_name(command: &str) -> String {
    format!("resolved_{command}.toml")
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> fundus_core::Result<()> {
    let out = cfg.output_dir.as_path();
    let snapshot = out.join(snapshot_name(command.name()));
    if snapshot.exists() && !command.common().overwrite {
        return Err(Error::Input(format!(
            "{} already holds a `{}` run; pass --overwrite to replace it",
            out.display(),
            command.name()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let text = cfg.to_toml()?;
    let hash = cfg.hash()?;
    std::fs::write(&snapshot, &text).map_err(|e| Error::Io {
        path: snapshot.clone(),
        source: e,
    })?;
    log::info!("command={} output_dir={} config_hash={hash}", command.name(), out.display());
    match command {
        Command::Synth(_) => commands::synth(cfg, out),
        Command::PrepareData(_) => commands::prepare_data(cfg, out),
        Command::Train(_) => commands::train_single(cfg, out, &hash),
        Command::Distill(_) => commands::distill(cfg, out, &hash),
        Command::TrainDual(_) => commands::train_dual(cfg, out, &hash),
        Command::Evaluate(_) => commands::evaluate_cmd(cfg, out, &hash),
        Command::Explain(_) => commands::explain(cfg, out, &hash),
        Command::Benchmark(_) => commands::benchmark(cfg, out, &hash),
    }
}

fn report(e: &Error) -> i32 {
    let code = if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME };
    eprintln!("error: category={} exit={code} {e}", category(e));
    code
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run(&cli.command)
}

pub fn run(command: &Command) -> i32 {
    let common = command.common();
    let overrides = Overrides {
        sets: common.sets.clone(),
        seed: common.seed,
        output_dir: common.output_dir.clone(),
    };
    let cfg = match ExperimentConfig::load(common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    match execute(command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// Reads back the snapshot a run wrote.
pub fn read_snapshot(out: &Path, command: &str) -> fundus_core::Result<ExperimentConfig> {
    ExperimentConfig::load(Some(&out.join(snapshot_name(command))), &Overrides::default())
}
