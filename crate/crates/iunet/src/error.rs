use std::path::PathBuf;

/// Errors of the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad configuration file or flags (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A check or assertion did not hold (exit code 1).
    #[error("verification failed: {0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] iunet_core::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Json(_) | AppError::Core(iunet_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
