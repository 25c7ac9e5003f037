//! `sitar` command-line entry point.
//!
//! Exit status: 0 success, 1 usage error, 2 run failure, 3 inconclusive
//! theorem verification.

mod commands;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sitar", version, about = "Shortcut-invariant training with correlation-targeted latent noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build train/val/test_in/test_ood containers and a stats report.
    BuildDataset(BuildDatasetArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train one model per grid point and seed, then aggregate.
    Sweep(SweepArgs),
    /// Decode latent traversals of a trained checkpoint.
    Traverse(TraverseArgs),
    /// Check the second-order noise expansion on built-in networks.
    VerifyTheorem(VerifyArgs),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["mnist_dir", "synthetic"]))]
pub struct BuildDatasetArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Draw procedural glyphs instead of reading MNIST.
    #[arg(long)]
    pub synthetic: bool,
    /// Training examples (before the validation hold-out). With MNIST, keeps
    /// the first n.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Test examples (shared by test_in and test_ood).
    #[arg(long, default_value_t = 2_000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub p_d: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_c_in: f64,
    #[arg(long, default_value_t = 0.9)]
    pub p_c_out: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Keep only the y == c groups in train and val.
    #[arg(long)]
    pub majority_only: bool,
}

/// Command-line overrides for every configuration key.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigFlags {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_cons: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the shortcut scores by ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub isotropic: Option<bool>,
    /// unweighted or class_balanced.
    #[arg(long)]
    pub weighting: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Comma-separated encoder channel widths.
    #[arg(long)]
    pub conv_channels: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory from build-dataset (else the `dataset` config key).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Root directory for runs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value = "run")]
    pub name: String,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// alpha, beta, lambda or targeting.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid; for targeting use anisotropic,isotropic.
    #[arg(long)]
    pub values: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long, default_value = "sweeps")]
    pub out: PathBuf,
    #[arg(long, default_value = "sweep")]
    pub name: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct TraverseArgs {
    /// Run directory holding checkpoint.bin.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; overrides --run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (default: <run>/traversals).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split holding the traversed example.
    #[arg(long, default_value = "test_in")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Sweep each coordinate over mu ± range.
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Test examples used for the channel-energy analysis.
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// linear, tanh-mlp, cubic or all.
    #[arg(long, default_value = "all")]
    pub case: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Monte Carlo samples per grid point of the scaling study.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    /// Also write the residual table here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Success,
    Failure,
    Inconclusive,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Traverse(a) => commands::traverse(&a),
        Command::VerifyTheorem(a) => commands::verify_theorem(&a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure) => ExitCode::from(2),
        Ok(Outcome::Inconclusive) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
