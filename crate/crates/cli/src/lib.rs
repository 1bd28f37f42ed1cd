//! Command-line surface and HTTP frame service for the `cubefield` engine.

pub mod args;
pub mod commands;
pub mod service;

use std::ffi::OsString;

use clap::Parser;

use crate::args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::E2c(a) => commands::e2c(a),
        Command::C2e(a) => commands::c2e(a),
        Command::Fit(a) => commands::run_fit(a),
        Command::Render(a) => commands::render(a),
        Command::Path(a) => commands::path(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            exit_code(&e)
        }
    }
}

/// Exit code for a failed command: numeric failures are 3, data errors 2.
pub fn exit_code(e: &cubefield::Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}
