//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TidmError {
    /// Shape or dimension mismatch in a tensor operation. Names the
    /// operation and the offending dims.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced a NaN or infinity.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A precondition on an argument was violated.
    #[error("{0}")]
    InvalidArgument(String),

    /// A prompt word outside the closed grammar.
    #[error("unknown word {word:?} (vocabulary: {vocab_path})")]
    UnknownWord { word: String, vocab_path: String },

    #[error("checkpoint: bad magic bytes")]
    CheckpointBadMagic,

    #[error("checkpoint: unknown format version {0}")]
    CheckpointUnknownVersion(u32),

    #[error("checkpoint: payload checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    CheckpointChecksum { stored: u64, computed: u64 },

    #[error("checkpoint: truncated or malformed file: {0}")]
    CheckpointTruncated(String),

    /// Training diverged (NaN loss).
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TidmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TidmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        TidmError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        TidmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TidmError>;
