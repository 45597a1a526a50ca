//! `stnas`: search-space counting, synthetic data, search, retraining,
//! costing and self-checks.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid flags or input, 3 numeric
//! failure (divergence, gradient check over tolerance).

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
