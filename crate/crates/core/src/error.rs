use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: empty set (no keys to attend over)")]
    EmptySet { op: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    /// Cholesky failed on slice `slice` of a batched factorization.
    #[error("matrix slice {slice} is not positive definite")]
    Cholesky { slice: usize },

    #[error("covariance not positive definite at t={t}, d={d}")]
    NotPositiveDefinite { t: usize, d: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("scene {scene}: {detail}")]
    Scene { scene: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures rooted in floating-point trouble (non-finite values,
    /// indefinite covariance).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Cholesky { .. } | Error::NotPositiveDefinite { .. } | Error::NonFinite(_) => {
                true
            }
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
