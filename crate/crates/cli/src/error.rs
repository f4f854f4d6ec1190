use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}, line {line}: {message}")]
    Data { path: PathBuf, line: usize, message: String },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("learning failed: {0}")]
    Learner(#[source] clf_irl::Error),

    #[error("certification failed: {0}")]
    Certification(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::File { path: path.into(), message: message.into() }
    }

    /// 1 learner failure, 2 I/O or configuration error, 3 certification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Learner(_) => 1,
            CliError::Io { .. } | CliError::Config(_) | CliError::Data { .. } | CliError::File { .. } => 2,
            CliError::Certification(_) => 3,
        }
    }
}

/// Core errors raised while setting up an experiment are configuration errors.
pub fn config_err(e: clf_irl::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;
