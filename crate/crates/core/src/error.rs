//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration values are inconsistent with each other or with an artifact.
    #[error("configuration error: {0}")]
    Config(String),

    /// A required external resource (adapter command, file) is unavailable.
    #[error("environment error: {0}")]
    Environment(String),

    /// A computation produced non-finite values or overflowed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not match its documented binary or text format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-parsable category name, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "configuration",
            Error::Environment(_) => "environment",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
