use std::path::PathBuf;

use ace_core::AceError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] AceError),
}

impl CliError {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 for bad configuration or input, 3 for I/O,
    /// 4 for numerical failure, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                AceError::Config { .. }
                | AceError::InvalidInput(_)
                | AceError::Dimension(_)
                | AceError::IndexOutOfRange { .. } => 2,
                AceError::Io { .. } | AceError::Parse { .. } => 3,
                AceError::NonFinite(_) => 4,
                AceError::InvalidState(_) => 1,
            },
        }
    }
}
