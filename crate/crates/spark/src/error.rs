use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum SparkError {
    /// Invalid configuration (bad dimensions, infeasible graph, zero k, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Mismatched wire metadata between peers (layer table, sketch width).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed input file; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A configured resource cap would be exceeded.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Checkpoint container problems (bad magic, version mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SparkError>;

impl SparkError {
    pub fn config(msg: impl Into<String>) -> Self {
        SparkError::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        SparkError::Contract(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        SparkError::Protocol(msg.into())
    }
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        SparkError::Parse { offset, message: message.into() }
    }
}
