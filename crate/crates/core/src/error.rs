//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input was NaN or infinite.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A caller broke an operation's precondition (dimension mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A data file could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An id referenced something outside the declared entity ranges.
    #[error("id out of range: {0}")]
    Range(String),

    /// Negative sampling had no admissible candidates.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A checkpoint file failed validation.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Checkpoint and dataset shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced non-finite values for a full epoch.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A configuration value was rejected.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code convention: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}
