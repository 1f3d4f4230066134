//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What went wrong while decoding a wire message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecFault {
    BadMagic,
    UnsupportedVersion(u16),
    Truncated,
    TrailingBytes,
    Malformed(&'static str),
}

impl std::fmt::Display for CodecFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecFault::BadMagic => write!(f, "bad magic"),
            CodecFault::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            CodecFault::Truncated => write!(f, "truncated payload"),
            CodecFault::TrailingBytes => write!(f, "trailing bytes after message"),
            CodecFault::Malformed(what) => write!(f, "malformed field: {what}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} out of range (size {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate input to {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("ingestion error at row {row}, column {col}: {reason}")]
    Ingest {
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Training {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("codec error at offset {offset} in section `{section}`: {fault}")]
    Codec {
        offset: usize,
        section: &'static str,
        fault: CodecFault,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Process exit code for the CLI. Documented in the README; stable.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Ingest { .. } | Error::Data(_) => 3,
            Error::Training { .. } => 4,
            Error::Protocol(_) | Error::Codec { .. } => 5,
            _ => 1,
        }
    }
}
