use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value in {context} (layer `{layer}`, index {index})")]
    NonFinite {
        context: &'static str,
        layer: String,
        index: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("episode already terminated at t = {0}")]
    TerminalState(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint has no Fisher information, which `{0}` needs")]
    MissingFisher(String),

    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("corrupted checkpoint: {0}")]
    CorruptedCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
