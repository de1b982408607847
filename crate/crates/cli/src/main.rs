//! `multiresnet`: train, analyse, lesion and simulate multi-residual networks.
//!
//! Every subcommand writes its outputs plus a `manifest.txt` into the output
//! directory (`--out`, or `MULTIRESNET_OUT`). Passing that manifest back via
//! `--config` reproduces the run.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Turn optional flag fields into `(key, value)` overrides.
macro_rules! flags {
    ($s:expr; $($field:ident),* $(,)?) => {
        vec![$((stringify!($field), $s.$field.as_ref().map(|v| v.to_string()))),*]
    };
}
pub(crate) use flags;

#[derive(Parser, Debug)]
#[command(name = "multiresnet", version, about = "Multi-residual network laboratory")]
struct Cli {
    /// Output directory for this run.
    #[arg(long, global = true, env = "MULTIRESNET_OUT", default_value = "multiresnet-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write a checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Test error of a checkpoint.
    Evaluate(EvalArgs),
    /// Path-depth distribution and effective range of the contribution curve.
    Analyze(AnalyzeArgs),
    /// Test error with each block dropped in turn.
    Lesion(EvalArgs),
    /// Input-gradient norm carried by paths of each depth.
    PathGradient(PathGradientArgs),
    /// Step time of one parallel training scenario.
    Simulate(SimulateArgs),
    /// Fit a cost model to measured step times.
    Calibrate(CalibrateArgs),
    /// Speedup of multi-function model parallelism over deep data parallelism.
    SpeedupTable(SpeedupArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// `synth` or `cifar10`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: Option<String>,
    /// Synthetic images generated, test split included.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key = value file, or the manifest of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    /// `basic` or `bottleneck`.
    #[arg(long)]
    pub block: Option<String>,
    /// `residual`, or `plain` for the no-skip control.
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Comma-separated fractions of the run, e.g. `0.5,0.75`.
    #[arg(long)]
    pub milestones: Option<String>,
    /// `on`, `off`, or `auto` (on for CIFAR-10 only).
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Residual blocks.
    #[arg(long)]
    pub n: Option<usize>,
    /// Residual functions per block.
    #[arg(long)]
    pub k: Option<usize>,
    /// Gradient factor per traversed function.
    #[arg(long)]
    pub r: Option<f64>,
    /// Coverage of the effective range, in (0, 1).
    #[arg(long)]
    pub p: Option<f64>,
    /// Scaling factor for the deeper-versus-wider comparison.
    #[arg(long)]
    pub c: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PathGradientArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint; without one a linear toy network is used.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Per-function gain of the toy network.
    #[arg(long)]
    pub toy_factor: Option<f64>,
    #[arg(long)]
    pub toy_blocks: Option<usize>,
    #[arg(long)]
    pub toy_k: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Sampled paths per depth.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Test images in the probe batch.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct CostArgs {
    /// Cost model file, e.g. written by `calibrate`.
    #[arg(long)]
    pub cost: Option<String>,
    #[arg(long)]
    pub t_fn: Option<f64>,
    #[arg(long)]
    pub t_fixed: Option<f64>,
    #[arg(long)]
    pub activation_bytes: Option<f64>,
    #[arg(long)]
    pub param_bytes_per_fn: Option<f64>,
    /// Bytes per second.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Seconds per transfer.
    #[arg(long)]
    pub latency: Option<f64>,
    #[arg(long)]
    pub warp: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub cost: CostArgs,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// `data`, `model` or `hybrid`.
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Step-time CSV; defaults to the bundled measurements.
    #[arg(long)]
    pub observations: Option<String>,
    /// Only fit rows with these mini-batch sizes (comma-separated; empty fits all).
    #[arg(long)]
    pub fit_batches: Option<String>,
    #[arg(long)]
    pub warp: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SpeedupArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Candidate depth; with `ks` and `batches` replaces the bundled pairs.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub ks: Option<String>,
    #[arg(long)]
    pub batches: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => commands::train(&cli.out, a),
        Command::Evaluate(a) => commands::evaluate(&cli.out, a),
        Command::Analyze(a) => commands::analyze(&cli.out, a),
        Command::Lesion(a) => commands::lesion(&cli.out, a),
        Command::PathGradient(a) => commands::path_gradient(&cli.out, a),
        Command::Simulate(a) => commands::simulate(&cli.out, a),
        Command::Calibrate(a) => commands::calibrate(&cli.out, a),
        Command::SpeedupTable(a) => commands::speedup_table(&cli.out, a),
    };
    match outcome {
        Ok(manifest) => {
            println!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
