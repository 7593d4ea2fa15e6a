//! `tapm`: generate synthetic data, train, evaluate and run inference.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tapm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tapm", version, about = "Infrared small-target segmentation with energy-guided trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic image/mask pairs and a manifest.
    Gen(GenArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Segment one image.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the loss curve and epoch table are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint's optimizer state and configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Which manifest entries to score: train, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write a two-column FPR/TPR table over thresholds 0.05..0.95.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Write the metrics as `key=value` lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Directory for energy maps, trajectory tables and the response map.
    #[arg(long)]
    pub dump_diagnostics: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
