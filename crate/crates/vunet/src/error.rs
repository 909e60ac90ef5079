//! Crate-wide error type.

/// Errors produced by tensor ops, the networks, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
