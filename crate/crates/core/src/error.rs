use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse grouping of errors, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// Unreadable, missing or malformed input files.
    Input,
    /// Inputs are well-formed but inconsistent with each other or the model.
    Validation,
    /// Fitting or calibration could not produce a usable result.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("empty set")]
    EmptySet,
    #[error("non-finite value at record {record}")]
    NonFinite { record: usize },
    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class index {index} out of range for {count} classes")]
    ClassOutOfRange { index: usize, count: usize },
    #[error("record index {index} out of bounds for {len} records")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("record index {0} appears in more than one split list")]
    OverlappingSplit(usize),
    #[error("class {0} not in train")]
    ClassNotInTrain(i32),
    #[error("class {class} has {count} training records, need at least {required}")]
    TooFewSamples {
        class: i32,
        count: usize,
        required: usize,
    },
    #[error("single-class input")]
    SingleClass,
    #[error("invalid label {label} at record {record}")]
    InvalidLabel { record: usize, label: i32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            Io { .. }
            | BadMagic { .. }
            | VersionMismatch { .. }
            | Truncated(_)
            | EmptySet
            | NonFinite { .. }
            | Malformed(_) => ErrorFamily::Input,
            Numeric(_) => ErrorFamily::Numeric,
            _ => ErrorFamily::Validation,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}
