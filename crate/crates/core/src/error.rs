//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operation rejected its input shapes. Carries the op name and the
    /// offending dimensions so callers can report something actionable.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward op produced NaN or Inf. Numerical blowups are never allowed
    /// to propagate silently.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Tape misuse: backward on a detached tensor, a second backward pass,
    /// or mixing tensors from different tapes.
    #[error("tape: {0}")]
    Tape(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact (checkpoint, dataset, bitstream) failed to parse.
    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Invalid configuration (bad key, bad value, inconsistent settings).
    #[error("config: {0}")]
    Config(String),

    /// Bitstream/checkpoint pair does not match the loaded model.
    #[error("model mismatch: bitstream has {found:016x}, checkpoint has {expected:016x}")]
    ModelMismatch { expected: u64, found: u64 },

    /// Entropy-coded payload ended early.
    #[error("truncated payload at byte {offset}")]
    Truncated { offset: usize },

    /// Anything else with a validated-input flavor.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Error {
        Error::Format { what, detail: detail.into() }
    }
}
