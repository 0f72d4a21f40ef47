use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] metarm_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing input {0}; run the upstream stage first")]
    Missing(PathBuf),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("hypergradient check failed: max relative error {max_rel_error:e}, min cosine {min_cosine}")]
    CheckFailed { max_rel_error: f64, min_cosine: f64 },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn format(path: &Path, msg: impl ToString) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.to_string() }
    }

    /// 2 for a failed numerical check, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
