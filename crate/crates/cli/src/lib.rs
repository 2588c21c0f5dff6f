//! Command-line driver and HTTP service for the latent judge ensemble.

pub mod cli;
pub mod service;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

/// Exit code for malformed invocations.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a well-formed command.
pub const EXIT_FAILURE: i32 = 1;

/// Parses `argv` (program name first), runs one subcommand and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match cli::Cli::try_parse_from(argv) {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match cli::run(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
