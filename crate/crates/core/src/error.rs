use thiserror::Error;

use crate::tape::Op;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op:?} at tape node {index} produced a non-finite value")]
    NonFiniteValue { op: Op, index: usize },

    #[error("singular matrix: pivot magnitude {pivot:e} is below 1e-12")]
    SingularMatrix { pivot: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("distance must be positive, got {0}")]
    InvalidDistance(f64),

    #[error("user count must be even, got {0}")]
    OddUserCount(usize),

    #[error("exhaustive clustering supports at most {limit} users, got {users}")]
    TooLarge { users: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format mismatch: {0}")]
    FormatVersionMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
}

pub type Result<T> = std::result::Result<T, Error>;
