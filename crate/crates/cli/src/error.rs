use std::path::PathBuf;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] revlm::Error),

    #[error("{0} check(s) failed")]
    Verification(usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 verification or numerical failure, 2 usage or I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Checkpoint { .. } => 2,
            CliError::Core(revlm::Error::Config(_)) => 2,
            CliError::Core(_) | CliError::Verification(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
