use thiserror::Error;

/// Errors produced by the engine and its backends.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration is internally inconsistent or unsatisfiable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence or replay exceeded backend capacity.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An operation was called in a state that forbids it.
    #[error("state error: {0}")]
    State(String),

    /// A trace or corpus file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A metric has no defined value for the given run.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
