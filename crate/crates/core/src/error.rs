use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no data: {0}")]
    NoData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: malformed row: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format for {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("triangulation failed: {0}")]
    Triangulation(String),

    #[error("SVD failed: {0}")]
    Svd(String),

    #[error("covariance matrix not positive definite")]
    NotPositiveDefinite,

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("{stage}: {source}")]
    Pipeline {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
