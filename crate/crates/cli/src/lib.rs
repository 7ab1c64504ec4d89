//! `ctn` command-line tool and HTTP correction service.

pub mod commands;
pub mod server;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{Cli, Command};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A bad invocation detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Maps an error to its exit code and stderr prefix.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    if err.downcast_ref::<UsageError>().is_some() {
        return (EXIT_USAGE, "usage");
    }
    match err.downcast_ref::<ctn_core::Error>().map(|e| e.class()) {
        Some(ctn_core::ErrorClass::Usage) => (EXIT_USAGE, "usage"),
        Some(ctn_core::ErrorClass::Numeric) => (EXIT_NUMERIC, "numeric"),
        _ => (EXIT_DATA, "data"),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            let (code, prefix) = classify(&err);
            eprintln!("error[{prefix}]: {err:#}");
            code
        }
    }
}
