use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while reading or validating the binary file formats.
#[derive(Error, Debug)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, got {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("rank deficient input: column {column} has pivot {pivot:e}")]
    Rank { column: usize, pivot: f64 },
    #[error("size error: {0}")]
    Size(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty evaluation: no labeled pixels")]
    EmptyEvaluation,
    #[error("format error in {path}: {source}")]
    Format {
        path: String,
        #[source]
        source: FormatError,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// An I/O error annotated with the file it concerns.
    pub(crate) fn io_at(path: &std::path::Path, e: io::Error) -> Self {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn format(path: impl Into<String>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}
