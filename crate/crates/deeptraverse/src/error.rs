use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] deeptraverse_core::Error),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        AppError::Format { path: path.into(), msg: msg.into() }
    }

    /// 2 for configuration and malformed-input problems, 3 for numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use deeptraverse_core::Error as E;
        match self {
            AppError::Config(_) | AppError::Format { .. } => 2,
            AppError::Core(E::Config(_) | E::Input(_)) => 2,
            AppError::Core(E::Numeric(_)) => 3,
            AppError::Core(E::Internal(_)) | AppError::Io { .. } | AppError::Failed(_) => 1,
        }
    }
}

/// Reads a whole file, attaching the path to any error.
pub fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}
