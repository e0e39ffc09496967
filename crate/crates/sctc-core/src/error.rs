//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration (empty layer list, zero scenes, bad toggle set, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk data. `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A stored scene or checkpoint violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An (action, object) combination has no row in the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Optimizer stepped before any backward pass produced gradients.
    #[error("missing gradient for parameter '{0}'; call backward before step")]
    MissingGradient(String),

    /// A loss or gradient became non-finite during training.
    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },

    /// Checkpoint/config mismatch when restoring parameters.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 IO/parse, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Vocab(_) => 1,
            Error::Parse { .. } | Error::Validation(_) | Error::Load(_) | Error::Io(_) => 2,
            Error::Dim(_) | Error::MissingGradient(_) | Error::NonFinite { .. } => 3,
        }
    }
}
