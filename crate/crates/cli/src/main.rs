//! `compose-probe`: crop planning, caption segmentation, retrieval
//! evaluation, benchmark construction and alignment-model training from the
//! command line.
//!
//! Exit codes: 0 success, 2 usage, 3 runtime or scorer failure, 4 malformed
//! input data.

mod biscor;
mod eval;
mod exit;
mod manifest;
mod plan;
mod source;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::exit::{Failure, Outcome, OrExit, USAGE};

#[derive(Debug, Parser)]
#[command(name = "compose-probe", version, about)]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the crop plan for an image size.
    PlanCrops(plan::PlanCropsArgs),
    /// Split a caption into segments.
    Segment(plan::SegmentArgs),
    /// Score a retrieval dataset and report I2T / T2I / Group.
    Eval(eval::EvalArgs),
    /// Combine eval reports into one table.
    Report(eval::ReportArgs),
    /// Build swap-benchmark instances from CLEVR scenes.
    BuildBiscor(biscor::BuildArgs),
    /// Train the alignment transformer.
    Train(train::TrainArgs),
    /// Train one model per depth and tabulate the results.
    SweepLayers(train::SweepArgs),
}

fn run(cli: &Cli) -> Outcome {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().or_exit(USAGE)?;
    }
    match &cli.command {
        Command::PlanCrops(a) => plan::plan_crops_cmd(a),
        Command::Segment(a) => plan::segment_cmd(a),
        Command::Eval(a) => eval::eval_cmd(a),
        Command::Report(a) => eval::report_cmd(a),
        Command::BuildBiscor(a) => biscor::build_cmd(a),
        Command::Train(a) => train::train_cmd(a),
        Command::SweepLayers(a) => train::sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
