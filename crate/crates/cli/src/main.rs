//! `metacal`: data generation, training, ablations, metric studies and
//! gradient checks.

mod args;
mod commands;
mod error;
mod keys;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, Result};

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, out),
        Command::Train(a) => commands::train(a, out),
        Command::Ablate(a) => commands::ablate(a, out),
        Command::MetricCompare(a) => commands::metric_compare(a, out),
        Command::Reliability(a) => commands::reliability(a, out),
        Command::GradCheck(a) => commands::grad_check(a, out),
        Command::HypergradCheck(a) => commands::hypergrad_check(a, out),
        Command::Retrain(a) => commands::retrain(a, out),
        Command::TempScale(a) => commands::temp_scale(a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let err = CliError::Usage(text.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json_line());
            ExitCode::from(err.exit_code())
        }
    }
}
