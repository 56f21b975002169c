//! `mspn`: dataset generation, training, evaluation and rendering.
//!
//! Exit status: 0 on success, 1 for usage and input errors, 2 for runtime failures.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mspn", version, about = "Multi-scale predictive-coding video prediction")]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML configuration file (experiment config; dataset config for `gen-data`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted `key=value` override applied on top of the configuration. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Seed replacing the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory [default: $MSPN_OUT_ROOT/<command>, or runs/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Checkpoint to evaluate, render or resume from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,

    /// Root under which default output directories are created.
    #[arg(long, env = "MSPN_OUT_ROOT", global = true, hide = true)]
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-digit dataset or ingest a directory of frame folders.
    GenData(GenDataArgs),
    /// Train a model; checkpoints and logs go to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a baseline) on a test set and write a metric report.
    Eval(EvalArgs),
    /// Write predicted frames for a dataset.
    Predict(PredictArgs),
    /// Draw ground truth over predictions for one sequence, as a PNG grid and a GIF.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Directory of frame folders to ingest instead of generating synthetic data.
    #[arg(long)]
    pub from_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the latest checkpoint in `<out>/checkpoints`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Mspn,
    CopyLast,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test dataset [default: `data.test` of the configuration].
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "mspn")]
    pub predictor: PredictorKind,

    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Sequence ids to predict [default: all].
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,

    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Sequence id [default: the first sequence].
    #[arg(long)]
    pub id: Option<String>,

    /// Frames to predict [default: the configured horizon].
    #[arg(long)]
    pub horizon: Option<usize>,
}

/// Marks errors caused by how the program was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! usage {
    ($($arg:tt)*) => { anyhow::Error::new($crate::UsageError(format!($($arg)*))) };
}
pub(crate) use usage;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<mspn_core::Error>() {
        Some(mspn_core::Error::Input(_) | mspn_core::Error::Dimension(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
