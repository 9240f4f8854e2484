//! Command-line front end: config resolution, run manifests, contact sheets
//! and the subcommand implementations behind the `luminet` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod sheet;

use std::fmt;

use luminet::ErrorKind;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;

/// An error carrying the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: msg.to_string(),
        }
    }

    pub fn checkpoint(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_CHECKPOINT,
            message: msg.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<luminet::Error> for CliError {
    fn from(e: luminet::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Checkpoint => EXIT_CHECKPOINT,
            ErrorKind::Internal => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
