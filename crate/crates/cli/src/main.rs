//! `pmt`: data generation, encoder pretraining, training, evaluation,
//! gradient checks, latency benchmarks and the ablation grid. Progress is
//! logged to stderr as JSON lines; results go to stdout.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pmt", version, about = "Plain mask transformer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset described by the config.
    GenData(Common),
    /// Train the encoder on the classification pretext and save it.
    PretrainEncoder(Common),
    /// Train a segmentation model and save a resumable checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(Common),
    /// Run the 64-bit gradient suite; exits nonzero on failure.
    Gradcheck(GradcheckArgs),
    /// Forward latency of one image.
    Bench(BenchArgs),
    /// Train and evaluate every model variant on the same encoder.
    Ablate(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.steps` (`train.pretrain_steps` for pretrain-encoder).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// eomt-frozen, pmt, pmt-nolateral or pmt-norope.
    #[arg(long, default_value = "pmt")]
    pub model: String,
    /// image or video.
    #[arg(long, default_value = "image")]
    pub mode: String,
    /// train or val.
    #[arg(long)]
    pub split: Option<String>,
    /// Input checkpoint: encoder or image model for train and ablate, model
    /// for eval.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per group.
    #[arg(long, default_value_t = 10)]
    pub instances: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Timed runs after warmup.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(100..))]
    pub runs: u64,
    #[arg(long, default_value_t = 10)]
    pub warmup: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::PretrainEncoder(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
