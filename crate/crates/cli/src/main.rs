//! `bem`: synthesize data, train, refine, evaluate and sweep.
//!
//! Exit codes: 0 success, 2 usage, 3 data or validation error, 4 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bem_core::BemError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bem",
    version,
    about = "Bayesian refinement of paired embedding tables"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Train the projection and inference networks.
    Train(TrainArgs),
    /// Emit refined tables from a trained model.
    Refine(RefineArgs),
    /// Evaluate an embedding table.
    Eval(EvalArgs),
    /// Train once per value of one hyper-parameter.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay { manifest: PathBuf },
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d_w: usize,
    #[arg(long, default_value_t = 32)]
    pub d_z: usize,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise_scale: f64,
    /// Hidden width of the true projection.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub signal_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into an existing directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    P,
    I,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeArg {
    Translation,
    Inner,
    Identity,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignArg {
    Strict,
    Intersect,
}

/// Hyper-parameter flags. Unset flags fall back to the config file, then to defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperFlags {
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub edge: Option<EdgeArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Bootstrap replicates for the prior.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// L2-normalize table rows before training.
    #[arg(long)]
    pub normalize: Option<bool>,
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub bg: PathBuf,
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long, value_enum, default_value_t = AlignArg::Strict)]
    pub align: AlignArg,
    /// Model file to write; the step log and manifest go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RefineArgs {
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub bg: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = AlignArg::Strict)]
    pub align: AlignArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Histogram,
    ClusterRatio,
    Recall,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// Second table, concatenated to the first (classify only).
    #[arg(long)]
    pub table2: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Number of random train/test splits (classify).
    #[arg(long, default_value_t = 1)]
    pub splits: usize,
    /// Random Gaussian projection to this dimension before classifying.
    #[arg(long)]
    pub project_dim: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub n_proj: usize,
    /// Sampled pairs (histogram).
    #[arg(long, default_value_t = 100_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Neighbours retrieved per trigger (recall).
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Lines of `user<TAB>trigger,trigger<TAB>attr,attr` (recall).
    #[arg(long)]
    pub users: Option<PathBuf>,
    /// Candidate table for recall; defaults to --table.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Also write the results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Lr,
    #[value(name = "nB")]
    NB,
    #[value(name = "nh")]
    Nh,
    Epochs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean ELBO over the last tenth of the steps.
    Elbo,
    /// Mean squared error of the refined bg table against --truth.
    Oracle,
    /// Classification accuracy of the refined bg table against --labels.
    Classify,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub bg: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long, value_enum, default_value_t = AlignArg::Strict)]
    pub align: AlignArg,
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    /// Noise-free table for `--metric oracle`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Run the values on separate threads.
    #[arg(long)]
    pub parallel: bool,
    /// Write the sweep table here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<BemError> for Failure {
    fn from(e: BemError) -> Self {
        Failure {
            code: if e.is_numerical() { 4 } else { 3 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command, std::env::args().skip(1).collect(), false) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
