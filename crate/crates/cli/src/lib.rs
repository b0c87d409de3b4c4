//! Command line and HTTP front end for posekit.

pub mod commands;
pub mod config;
pub mod exit;
pub mod server;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use commands::{Cli, Command};

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr as a single JSON line.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return exit::EXIT_OK;
            }
            let err = anyhow::Error::new(exit::UsageError(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or("")));
            eprintln!("{}", exit::error_line(&err).1);
            return exit::EXIT_USAGE;
        }
    };
    match commands::run(cli, out) {
        Ok(()) => exit::EXIT_OK,
        Err(err) => {
            let (code, line) = exit::error_line(&err);
            eprintln!("{line}");
            code
        }
    }
}
