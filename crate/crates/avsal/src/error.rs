//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto process exit codes in the CLI: everything the caller
/// can fix by changing inputs or configuration exits with 1, [`Error::Internal`]
/// exits with 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors or between a tensor and an
    /// operation's requirements.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Bad input data (too-short waveform, empty fixation map, missing file
    /// content, un-normalizable map, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent or invalid configuration detected at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Numerically degenerate input where a quantity is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Invariant breakage inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error: 1 for caller-correctable problems,
    /// 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Error {
        Error::Dimension(msg.into())
    }
}
