//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by the library and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum SmicaError {
    /// Invalid configuration: bad band layout, inconsistent shapes, bad flags.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data (non-finite samples, malformed files).
    #[error("invalid data: {0}")]
    Data(String),

    /// Numerical failure: singular system, non-decreasing loss, failed factorization.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SmicaError>;

impl SmicaError {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SmicaError::Config(_) | SmicaError::Data(_) | SmicaError::Io(_) => 2,
            SmicaError::Numerical(_) => 3,
        }
    }

    /// Short machine-parsable kind tag used on the diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            SmicaError::Config(_) => "config",
            SmicaError::Data(_) => "data",
            SmicaError::Numerical(_) => "numerical",
            SmicaError::Io(_) => "io",
        }
    }
}
