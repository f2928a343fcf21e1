use std::path::PathBuf;

use thiserror::Error;

/// Everything a command can fail with, grouped by process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    /// Invalid configuration or command-line usage (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Failure inside training or surgery (exit 3).
    #[error(transparent)]
    Core(#[from] archlearn_core::Error),
    /// Filesystem failure (exit 4).
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed data or checkpoint file (exit 4).
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AppError::Format { path: path.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Core(archlearn_core::Error::ArchSpec(_)) => 2,
            AppError::Core(_) => 3,
            AppError::Io { .. } | AppError::Format { .. } => 4,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
