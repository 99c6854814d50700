//! `saliency-sanity`: dataset generation, training, explanation and the
//! two randomization sanity suites from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 completed with warnings (skipped images, no detections, a
//! training target that was not reached).

mod args;
mod commands;
mod config_file;
mod error;
mod manifest;
mod report;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use crate::args::{Cli, Command};
use crate::error::CliError;

/// How a command that ran to the end went.
#[derive(Debug)]
pub enum Status {
    Success,
    Warnings(Vec<String>),
}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn run(argv: Vec<OsString>) -> Result<Status, CliError> {
    let cli = match parse(argv.clone()) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(CliError::from_clap(&e)),
        Err(e) => {
            // --help and --version.
            print!("{}", e.render());
            return Ok(Status::Success);
        }
    };
    // Values from a config file go in front of the command-line flags,
    // which therefore win.
    let cli = match &cli.config {
        Some(path) => {
            let merged = config_file::merge(&argv, path, &Cli::command())?;
            parse(merged).map_err(|e| CliError::from_clap(&e))?
        }
        None => cli,
    };
    init_logging(cli.verbose);
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::ModelSanity(a) => commands::model_sanity(&a),
        Command::DataSanity(a) => commands::data_sanity(&a),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Warnings(warnings)) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
