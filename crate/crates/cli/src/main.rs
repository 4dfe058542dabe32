//! `paraformer`: data generation, training, matching, evaluation, FLOPs
//! tables and gradient checks.
//!
//! Exit codes: 0 ok, 1 usage, 2 contract violation, 3 numeric failure.

mod commands;
mod config;
mod failure;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::{usage, CmdResult};

#[derive(Parser)]
#[command(name = "paraformer", version, about = "Parallel-attention keypoint matcher")]
struct Cli {
    /// Worker threads for data generation, matching and evaluation.
    /// Training always runs on the calling thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic homography dataset.
    GenData(commands::gen_data::Args),
    /// Train a model, or resume a checkpoint.
    Train(commands::train::Args),
    /// Run the matcher on a dataset and write the matches.
    Match(commands::infer::MatchArgs),
    /// Score a model and the nearest-neighbour baseline on a dataset.
    Eval(commands::infer::EvalArgs),
    /// Print operation counts for the preset architectures.
    Flops(commands::report::FlopsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(commands::report::GradcheckArgs),
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Match(a) => commands::infer::run_match(a),
        Command::Eval(a) => commands::infer::run_eval(a),
        Command::Flops(a) => commands::report::run_flops(a),
        Command::Gradcheck(a) => commands::report::run_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
