use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] versemi_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Usage(#[from] clap::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 I/O, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        use versemi_core::Error as E;
        match self {
            CliError::Core(E::Io { .. } | E::Header { .. } | E::Truncated { .. } | E::NonBinaryMask { .. }) => 2,
            CliError::Core(E::Numerical { .. }) => 3,
            CliError::Core(_) | CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Usage(e) if !e.use_stderr() => 0,
            CliError::Usage(_) => 1,
        }
    }
}
