use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("problem too large: {0}")]
    Size(String),
    #[error("expert error: {0}")]
    Expert(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("incomparable estimates: {0}")]
    Incomparable(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {path}: needed {needed} bytes at offset {offset}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("checkpoint tensor {name}: shape {found:?} does not match expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint contains unknown tensor {0}")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid file contents: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite or otherwise broken numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }

    /// True for filesystem and file-format failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated { .. }
                | Error::CheckpointShape { .. }
                | Error::UnknownTensor(_)
                | Error::MissingTensor(_)
                | Error::Validation(_)
        )
    }
}
