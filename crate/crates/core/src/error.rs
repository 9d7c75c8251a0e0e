use thiserror::Error;

use neumap_diff::DiffError;
use neumap_geometry::GeometryError;

/// Structured failure while reading one of the binary containers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u32 },
    #[error("truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid content at offset {offset}: {msg}")]
    Invalid { offset: usize, msg: String },
    #[error("{extra} trailing bytes after offset {offset}")]
    Trailing { offset: usize, extra: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric abort at epoch {epoch}, batch {batch}: {source}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        #[source]
        source: DiffError,
    },
    #[error("length mismatch: {0}")]
    Length(String),
}

impl Error {
    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericAbort { .. }
                | Error::Diff(DiffError::NonFinite { .. })
                | Error::Diff(DiffError::NonFiniteGrad { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
