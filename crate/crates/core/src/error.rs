use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file: {0}")]
    Nifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated data section: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid raw volume file: {0}")]
    RawVolume(String),

    #[error("wrong intensity domain: expected {expected:?}, found {found:?}")]
    WrongDomain {
        expected: crate::volume::Domain,
        found: crate::volume::Domain,
    },

    #[error("degenerate intensity range: p1 == p99 == {0}")]
    DegenerateRange(f64),

    #[error("dimension error: {0}")]
    Dims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
