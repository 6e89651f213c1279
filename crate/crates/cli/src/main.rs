//! `caplab`: capacities, scaling sweeps, counterexample certification and
//! regime classification from the command line.

mod commands;
mod config;
mod output;
mod svg;

use std::process::ExitCode;

use clap::Parser;

use crate::commands::{Cli, Status};
use crate::config::CliError;

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CAPLAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|t| *t > 0).ok_or_else(|| {
        CliError::Config(format!(
            "CAPLAB_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| commands::run(cli));
    match result {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::CertificationFailed) => ExitCode::from(3),
        Ok(Status::NotConverged) => {
            eprintln!("warning: the minimization stopped at the iteration limit");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
