//! Crate-wide error type and the CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

/// All errors surfaced by the library and the command-line front end.
#[derive(Debug, Error)]
pub enum XaeError {
    // Configuration / specification problems.
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown source group {0}")]
    UnknownGroup(String),

    // Data / file problems.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("{path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0:?} belongs to no source group")]
    OrphanLabel(String),
    #[error("dataset error: {0}")]
    InvalidData(String),

    // Numeric problems.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty batch for source group {0}")]
    EmptyBatch(usize),
    #[error("non-finite {term} cost at epoch {epoch}; try a smaller learning rate")]
    Diverged { term: &'static str, epoch: usize },
    #[error("numeric error: {0}")]
    Numeric(String),

    // Verification problems (gradient check and friends).
    #[error("verification failed: {0}")]
    Verification(String),
}

impl XaeError {
    /// Process exit code class: 2 configuration, 3 data, 4 numeric, 5 verification.
    pub fn exit_code(&self) -> u8 {
        use XaeError::*;
        match self {
            InvalidPartition(_) | InvalidConfig(_) | UnknownGroup(_) => 2,
            Io { .. }
            | BadMagic { .. }
            | MalformedFile { .. }
            | CountMismatch { .. }
            | OrphanLabel(_)
            | InvalidData(_) => 3,
            DimMismatch { .. } | EmptyBatch(_) | Diverged { .. } | Numeric(_) => 4,
            Verification(_) => 5,
        }
    }

    /// Wrap an I/O error with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XaeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, XaeError>;
