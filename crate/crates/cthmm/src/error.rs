//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or usage: unknown keys, missing paths, invalid option values.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure: non-finite values, singular systems, kernel breakdown.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Estimation could not produce a usable result.
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data_at_line(line: usize, message: impl std::fmt::Display) -> Self {
        Error::Data(format!("line {line}: {message}"))
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical/estimation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 1,
            Error::Data(_) => 2,
            Error::Numerical(_) | Error::Estimation(_) => 3,
        }
    }
}
