use std::io;
use std::path::PathBuf;

/// Why a checkpoint file was rejected.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a VPUF checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint digest mismatch")]
    DigestMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] vpu_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// 2 for bad input or configuration, 3 for IO and corruption, 4 for
    /// numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(vpu_core::Error::Numeric(_)) => 4,
            AppError::Core(_) | AppError::Invalid(_) => 2,
            AppError::Io { .. } | AppError::Checkpoint { .. } | AppError::Corrupt(_) => 3,
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
