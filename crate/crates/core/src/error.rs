//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        what: &'static str,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("unsupported method: {0}")]
    Unsupported(String),

    #[error("non-finite gradient; update rejected")]
    NonFiniteGradient,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("plan space too large: {0}")]
    PlanSpace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
