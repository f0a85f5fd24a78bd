//! `twinspec`: mixing, training, enhancement, evaluation and inspection
//! for the two-branch speech enhancement model.

mod args;
mod commands;
mod image;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

/// A problem with the command line, the configuration or the environment,
/// as opposed to the data being processed.
#[derive(Debug)]
pub struct ConfigProblem(pub String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigProblem>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<twinspec_core::Error>() {
            return match e {
                _ if e.is_numeric() => EXIT_NUMERIC,
                twinspec_core::Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
        if let Some(twinspec_nn::NnError::Numeric(_)) = cause.downcast_ref::<twinspec_nn::NnError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("TWINSPEC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigProblem(format!("TWINSPEC_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigProblem(format!("cannot start {n} worker threads: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Mix(a) => commands::mix(a),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Eval(a) => commands::eval(a),
        Command::PhaseDiff(a) => commands::phase_diff(a),
        Command::Params(a) => commands::params(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
