use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension { op: &'static str, lhs: String, rhs: String },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index { what: &'static str, index: usize, bound: usize },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid box {0}")]
    InvalidBox(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("dangling object reference {object} (only {available} objects)")]
    Reference { object: usize, available: usize },

    #[error("{count} ground-truth boxes exceed region budget {budget}")]
    Budget { count: usize, budget: usize },

    #[error("cannot sample a negative: {0}")]
    NoNegative(String),

    #[error("training aborted at step {step}: {component} loss is {value}")]
    NonFiniteLoss { step: usize, component: String, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::Dimension { op, lhs: format!("{lhs:?}"), rhs: format!("{rhs:?}") }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
