use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("classifier row for class {class} has zero norm")]
    DegenerateWeight { class: usize },

    #[error("cleaning would remove every sample of class {class}")]
    ClassExhausted { class: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("size mismatch in {}: expected {expected} bytes, found {found}", .file.display())]
    SizeMismatch {
        file: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checksum mismatch in {}", .0.display())]
    Checksum(PathBuf),

    /// Stored data is readable but violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("sample id mismatch: {0}")]
    IdMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that stem from a bad configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
