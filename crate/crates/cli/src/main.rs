use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssmlab_core::Error;

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "ssmlab", version, about = "Structured state-space memorization laboratory")]
struct Cli {
    /// Worker threads for batch generation, evaluation and seed fan-out.
    /// `1` is fully deterministic; so is any other value.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Continuous vs. discretized HiPPO kernels for a list of step sizes.
    Kernels(commands::KernelsArgs),
    /// Generate a holdout registry and a dump of training instances.
    Tasks(commands::TasksArgs),
    /// Train one model per seed.
    Train(commands::TrainArgs),
    /// Score a checkpoint on the held-out test protocol.
    Eval(commands::EvalArgs),
    /// Aggregate evaluated runs across seeds.
    Report(commands::ReportArgs),
}

/// Exit status for a failure: 2 usage/configuration, 3 divergence,
/// 4 artifact or format mismatch.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Input(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Format { .. } | Error::Mismatch(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
        _ => 1,
    }
}

pub struct Failure {
    pub error: Error,
    /// Extra context printed after the error, e.g. the last good checkpoint.
    pub note: Option<String>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { error, note: None }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
        .expect("thread pool is configured once");
    let result = match cli.command {
        Command::Kernels(a) => commands::kernels(a),
        Command::Tasks(a) => commands::tasks(a),
        Command::Train(a) => commands::train(a, cli.workers),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.error);
            if let Some(note) = f.note {
                eprintln!("{note}");
            }
            ExitCode::from(exit_code(&f.error))
        }
    }
}

pub type CmdResult = Result<PathBuf, Failure>;
