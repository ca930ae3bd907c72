use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error for movie `{movie_id}`: {reason}")]
    Ingestion { movie_id: String, reason: String },

    #[error("{path}: row {row}: {reason}")]
    Parse {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("model file error: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by malformed or missing input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Stratification(_)
                | Error::Provider(_)
                | Error::ModelFormat(_)
        )
    }
}
