//! Command-line runner: configuration handling and the commands behind the
//! `stvfr` binary.

pub mod commands;
pub mod config;

use stvfr_core::Error;

/// Exit status of a failed command: 2 for configuration errors, 1 for
/// everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}
