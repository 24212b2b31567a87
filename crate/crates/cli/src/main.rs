mod ablate;
mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use lens_core::error::ErrorKind;
use lens_core::LensError;

use crate::args::Cli;
use crate::commands::CheckFailed;

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LensError>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            };
        }
        if cause.is::<CheckFailed>() {
            return EXIT_NUMERICAL;
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&cli.command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
