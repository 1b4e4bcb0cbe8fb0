use thiserror::Error;

/// Errors raised by the library. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Missing or inconsistent configuration (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-domain input data (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-PSD matrices, failed decompositions, runaway loops (exit code 4).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Wall-clock budget exhausted (exit code 5).
    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Csv(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Budget(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
