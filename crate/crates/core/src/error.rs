//! Error type shared by every module in the crate.
//!
//! Variants are grouped by how a front end should react to them:
//! [`CoreError::kind`] collapses the enum into a small set of
//! [`ErrorKind`] categories that map onto process exit codes.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse category of a failure, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, bad configuration, or invalid input metadata.
    /// Detected before any output is produced.
    Validation,
    /// A pipeline stage failed at runtime (I/O, numerical preconditions,
    /// inconsistent data discovered mid-run).
    Runtime,
    /// An external segmenter backend violated the wire protocol, crashed,
    /// or timed out.
    Backend,
}

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a NIfTI-1 file{}: {reason}", fmt_path(path))]
    NiftiFormat {
        path: Option<PathBuf>,
        reason: String,
    },

    #[error("unsupported NIfTI datatype code {code}; supported: float32 (16), int32 (8), uint8 (2)")]
    UnsupportedDatatype { code: i16 },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("gradient table error{}: {reason}", fmt_path(path))]
    GradientTable {
        path: Option<PathBuf>,
        reason: String,
    },

    #[error("gradient scheme unusable for tensor fitting: {0}")]
    InsufficientScheme(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("label schema error: {0}")]
    SchemaValidation(String),

    #[error("label data error: {0}")]
    LabelData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend protocol error: {0}")]
    BackendProtocol(String),

    #[error("backend process error: {0}")]
    BackendProcess(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("{0}")]
    Argument(String),
}

fn fmt_path(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

impl CoreError {
    /// Category used for exit-code mapping: validation (2), runtime (3),
    /// backend (4).
    pub fn kind(&self) -> ErrorKind {
        use CoreError::*;
        match self {
            NiftiFormat { .. }
            | UnsupportedDatatype { .. }
            | GradientTable { .. }
            | InsufficientScheme(_)
            | SchemaValidation(_)
            | Config(_)
            | Argument(_) => ErrorKind::Validation,
            BackendProtocol(_) | BackendProcess(_) => ErrorKind::Backend,
            Io { .. } | InvalidVolume(_) | InvalidTransform(_) | LabelData(_)
            | MetricUndefined(_) => ErrorKind::Runtime,
        }
    }
}

/// Convenience alias used across the crate.
pub type Result<T, E = CoreError> = std::result::Result<T, E>;
