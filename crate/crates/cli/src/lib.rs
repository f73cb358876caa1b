//! Command implementations behind the `longvq` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod report;

use std::fmt;

/// Failure of a command, with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; exit code 2.
    Config(String),
    /// Runtime failure; exit code 1.
    Run(longvq::Error),
    /// The command ran but its check did not pass; exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<longvq::Error> for CliError {
    fn from(e: longvq::Error) -> Self {
        match e {
            longvq::Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Run(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
