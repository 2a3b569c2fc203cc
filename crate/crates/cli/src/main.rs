mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Exit status 1 for bad invocations, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mwq_core::MwqError> for Failure {
    fn from(e: mwq_core::MwqError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// `MWQ_THREADS` caps internal parallelism; every code path is single-threaded.
fn check_threads() -> Result<usize, Failure> {
    match std::env::var("MWQ_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => usage(format!("MWQ_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    check_threads()?;
    match cli.command {
        Command::Dwt(a) => commands::dwt(args::resolve(a)?),
        Command::AnalyzeStates(a) => commands::analyze_states(args::resolve(a)?),
        Command::Compress(a) => commands::compress(args::resolve(a)?),
        Command::Decompress(a) => commands::decompress(args::resolve(a)?),
        Command::Train(a) => commands::train(args::resolve(a)?),
        Command::Enhance(a) => commands::enhance(args::resolve(a)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
