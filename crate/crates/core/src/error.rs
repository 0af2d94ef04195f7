use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    /// A computation produced or received NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("index {index} out of range for {len} models")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding an IDX file. Offsets are byte positions in the file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number {found:#010x} at offset 0 (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("file truncated at offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dimension mismatch at offset {offset}: {reason}")]
    DimensionMismatch { offset: usize, reason: String },

    #[error("label {label} at offset {offset} exceeds {classes} classes")]
    LabelOutOfRange {
        offset: usize,
        label: u8,
        classes: usize,
    },
}

impl AceError {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        AceError::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        AceError::Dimension(msg.into())
    }
}
