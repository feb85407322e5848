//! Command-line pipeline: data generation, two-stage training, evaluation,
//! latency benchmarking and selection analysis.
//!
//! Every command resolves its settings as flags > config file > defaults,
//! writes the fully resolved configuration next to its outputs, and leaves
//! a FAILED marker in the output directory when it errors out.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fastfid", version, about = "Fusion-in-decoder reader with sentence selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/dev/test dataset files plus vocabulary.
    GenData(commands::gen::GenArgs),
    /// Stage 1: multi-task training (generation + span selection).
    TrainStage1(commands::train::Stage1Args),
    /// Stage 2: select-generation training from a stage-1 checkpoint.
    TrainStage2(commands::train::Stage2Args),
    /// Evaluate a checkpoint on a dataset file.
    Eval(commands::eval::EvalArgs),
    /// Time per question and context length across inference modes.
    Bench(commands::bench::BenchArgs),
    /// Selection accuracy@k curve and cross-attention contribution study.
    Analyze(commands::analyze::AnalyzeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (result, out_dir): (anyhow::Result<()>, Option<PathBuf>) = match cli.command {
        Command::GenData(a) => {
            let out = Some(a.out.clone());
            (commands::gen::run(a), out)
        }
        Command::TrainStage1(a) => {
            let out = Some(a.out.clone());
            (commands::train::run_stage1(a), out)
        }
        Command::TrainStage2(a) => {
            let out = Some(a.out.clone());
            (commands::train::run_stage2(a), out)
        }
        Command::Eval(a) => {
            let out = a.out.clone();
            (commands::eval::run(a), out)
        }
        Command::Bench(a) => {
            let out = Some(a.out.clone());
            (commands::bench::run(a), out)
        }
        Command::Analyze(a) => {
            let out = Some(a.out.clone());
            (commands::analyze::run(a), out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // partial outputs must never look complete
            if let Some(dir) = out_dir {
                if dir.exists() {
                    let _ = std::fs::write(dir.join("FAILED"), format!("{e:#}\n"));
                }
            }
            ExitCode::FAILURE
        }
    }
}
