use thiserror::Error;

use crate::engine::EngineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("malformed IDX data at byte {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
