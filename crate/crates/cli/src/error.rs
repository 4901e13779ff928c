use std::fmt;

use bellman_core::Error;

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// At least one built-in check failed.
    CheckFailed { failed: usize, total: usize },
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Errors raised while turning the configuration into a model.
    pub fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Errors raised while running on data. Bad observations are reported as
    /// input errors; everything else is a numerical failure.
    pub fn run(e: Error) -> Self {
        match e.root() {
            Error::InvalidObservation(_) | Error::DimensionMismatch(_) => CliError::Io(e.to_string()),
            Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::CheckFailed { failed, total } => write!(f, "{failed} of {total} checks failed"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;
