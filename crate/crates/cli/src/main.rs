//! `step` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 internal
//! error (e.g. a failed benchmark cross-check).

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "step", version, about = "Structured ternary pattern networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a ternary filter bank (packed blob + JSON descriptor).
    Gen(GenArgs),
    /// Summarize a bank file; optionally render kernels as ASCII.
    Inspect(InspectArgs),
    /// Build a model from a config and save its initial checkpoint.
    Build(BuildArgs),
    /// Parameter census, memory estimate and reduction table.
    Count(CountArgs),
    /// Train a model at desk scale; writes a CSV log and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Benchmark the reference vs ternary convolution paths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Kernel family: cslbp | haar | random_binary
    #[arg(long)]
    pub family: String,
    /// Bank shape as h,w,k,f (kernel height, width, in channels, filters)
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output blob path; the descriptor lands at <out>.json
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Also export one PGM image per kernel into this directory
    #[arg(long)]
    pub pgm: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Bank blob path (reads <bank>.json alongside when present)
    #[arg(long)]
    pub bank: std::path::PathBuf,
    /// Render the first N kernels as ASCII grids
    #[arg(long, default_value_t = 0)]
    pub kernels: usize,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Architecture config (.toml or .json)
    #[arg(long)]
    pub config: std::path::PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Architecture config (.toml or .json)
    #[arg(long, required_unless_present = "literal_counts")]
    pub config: Option<std::path::PathBuf>,
    /// Compare against a baseline: only "float" (the float twin) is defined
    #[arg(long)]
    pub baseline: Option<String>,
    /// Skip model construction: account literal counts <trainable> <frozen>
    #[arg(long, num_args = 2, value_names = ["TRAINABLE", "FROZEN"])]
    pub literal_counts: Option<Vec<u64>>,
    /// Frozen parameters are 2-bit ternary (default with --literal-counts)
    #[arg(long)]
    pub ternary: bool,
    /// Frozen parameters are 1-bit binary
    #[arg(long, conflicts_with = "ternary")]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    /// Directory holding CIFAR-10 binary batches
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<std::path::PathBuf>,
    /// Generate and use a synthetic dataset in this directory instead
    #[arg(long)]
    pub synthetic: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// sgd | adam
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    /// cosine | const
    #[arg(long, default_value = "cosine")]
    pub schedule: String,
    /// Cap on training records
    #[arg(long)]
    pub subset: Option<usize>,
    /// Cap on test records used for the per-epoch eval column
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint output path
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// CSV log output path (defaults to <out>.csv)
    #[arg(long)]
    pub log: Option<std::path::PathBuf>,
    /// Warm-start parameters from an existing checkpoint
    #[arg(long)]
    pub resume: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<std::path::PathBuf>,
    #[arg(long)]
    pub synthetic: Option<std::path::PathBuf>,
    /// test | train
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub subset: Option<usize>,
    /// Use the quantized test-time activation
    #[arg(long)]
    pub quantized: bool,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Shape list file: lines of n,c,h,w,f,kh,kw,stride,pad,family
    #[arg(long)]
    pub shapes: std::path::PathBuf,
    /// Timed repetitions per path (median reported)
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV here (always printed to stdout)
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(threads) = std::env::var("STEP_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            step_core::set_worker_threads(n);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
