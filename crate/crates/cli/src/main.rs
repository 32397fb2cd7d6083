//! `evoshard` command-line front end. Every command prints one JSON report
//! (or a flattened table of it) on stdout.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or
//! validation error, 3 model-constraint violation, 4 infeasible budget.

mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, Outcome};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
