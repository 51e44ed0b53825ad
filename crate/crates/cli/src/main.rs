//! `amped`: reproducible experiments around the pruned edge detector.

mod commands;
mod error;
mod manifest;
mod schema;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "amped", version, about = "Token-pruned transformer edge detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// Run configuration (JSON, validated against the published schema).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Model checkpoint to read (infer, prune-sweep) or resume from (train).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides the configuration's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for per-image and per-schedule fan-out.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Overrides the training seed (weight initialisation and batch order).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    VitB,
    VitL,
    /// The model section of `--config`.
    Config,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write the configured synthetic dataset to `<out>/dataset`.
    GenData,
    /// Train a model; writes checkpoints and a JSON-lines log.
    Train,
    /// Predict edge maps; writes 16-bit PGMs and per-image trace JSON.
    Infer {
        /// Image files or directories of `.pgm`/`.ppm` files; defaults to the
        /// configured test split.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        /// Run the encoder without pruning.
        #[arg(long)]
        no_prune: bool,
    },
    /// Evaluate a checkpoint under every threshold tuple of the sweep.
    PruneSweep,
    /// Analytic multiply-accumulate report.
    Flops {
        #[arg(long, value_enum, default_value = "config")]
        arch: Arch,
        /// JSON per-layer token counts, or a trace written by `infer`.
        #[arg(long, value_name = "PATH")]
        retention: Option<PathBuf>,
    },
    /// Score predicted edge maps against ground truth.
    Eval {
        /// Directory of `<id>.pgm` predictions.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of `<id>.gt<k>.pbm` annotator maps.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Number of binarisation thresholds.
        #[arg(long)]
        thresholds: Option<usize>,
        /// Skip non-maximum suppression (predictions are already thin).
        #[arg(long)]
        no_nms: bool,
    },
    /// Re-run the invocation recorded in a `run-manifest.json`.
    Replay {
        manifest: PathBuf,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("AMPED_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let jobs = match cli.common.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| commands::dispatch(cli.command, cli.common))
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
