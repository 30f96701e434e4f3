use std::path::PathBuf;

use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing {}: run `kgseq {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::MissingArtifact { .. } | AppError::Io { .. } => 3,
            AppError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<kgseq_core::Error> for AppError {
    fn from(e: kgseq_core::Error) -> Self {
        use kgseq_core::Error as E;
        match e {
            E::NonFinite { .. } | E::NonFiniteOp(_) => AppError::Numerical(e.to_string()),
            E::Parse { .. } | E::Resolution { .. } | E::Domain(_) => AppError::Data(e.to_string()),
            _ => AppError::Config(e.to_string()),
        }
    }
}
