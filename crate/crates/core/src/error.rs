use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument that violates an operation's precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A sidecar or checkpoint header is malformed or disagrees with the payload.
    #[error("invalid header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("mask {path} contains non-binary value {value} at voxel {index}")]
    NonBinaryMask {
        path: PathBuf,
        value: u8,
        index: usize,
    },

    /// ASD / HD95 requested on an empty prediction or ground truth.
    #[error("undefined-surface-metric: {0}")]
    UndefinedSurfaceMetric(&'static str),

    #[error("numerical abort at step {step} (batch seed {batch_seed}): {reason}")]
    Numerical {
        step: u64,
        batch_seed: u64,
        reason: String,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Header {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
