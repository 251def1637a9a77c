//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CdlError>;

#[derive(Debug, thiserror::Error)]
pub enum CdlError {
    /// Tensor/layer dimension disagreement. Names the offending axes so the
    /// failing transition can be located without a debugger.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A network specification that cannot be realized.
    #[error("invalid network spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },

    /// Violated precondition of a pure operation.
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// IDX dataset file could not be parsed. Offsets are byte positions
    /// within the file.
    #[error("IDX parse error in {path}: {reason} (at byte offset {offset})")]
    IdxParse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    /// Image and label files disagree on the number of samples.
    #[error("dataset count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// Model container violations.
    #[error("bad model container magic in {path}")]
    BadMagic { path: PathBuf },
    #[error("unsupported model container version {version} in {path}")]
    UnsupportedVersion { version: u32, path: PathBuf },
    #[error("model container checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("model container truncated in {path}: needed {needed} bytes at offset {offset}")]
    ContainerTruncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("wrong model kind: expected {expected}, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },

    /// Configuration problems (bad flag values, missing paths, parse errors).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CdlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for training divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CdlError::NonFiniteLoss { .. } => 2,
            _ => 1,
        }
    }
}
