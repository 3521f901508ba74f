use std::path::{Path, PathBuf};

use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// A check ran and did not pass (exit 1).
    #[error("{0}")]
    Verification(String),

    /// Bad flags, configuration or incompatible inputs (exit 2).
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but is not a well-formed artifact (exit 3).
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] xfmamba::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use xfmamba::Error as E;
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Core(E::Config { .. } | E::Contract { .. } | E::Dimension { .. }) => 2,
            CliError::Core(E::Numeric { .. } | E::Diverged { .. } | E::UndefinedMetric { .. }) => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
