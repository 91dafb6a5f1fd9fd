//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// What went wrong while decoding a binary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// The magic bytes did not match; this is not one of our files.
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    /// The file is ours but written by an incompatible format version.
    UnsupportedVersion { expected: u32, got: u32 },
    /// The file ended before the header-declared payload did.
    Truncated { expected: u64, got: u64 },
    /// Structurally invalid content (bad dims, label out of range, ...).
    Corrupt(String),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic { expected, got } => write!(
                f,
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            ),
            FormatErrorKind::UnsupportedVersion { expected, got } => {
                write!(f, "unsupported format version {got} (this build reads {expected})")
            }
            FormatErrorKind::Truncated { expected, got } => {
                write!(f, "truncated file: expected {expected} bytes, got {got}")
            }
            FormatErrorKind::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("{op}: empty input (zero-sized batch or spatial extent)")]
    EmptyInput { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    #[error("gradient tape: {0}")]
    Tape(String),

    #[error("network build: {0}")]
    Build(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatErrorKind },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code contract: 0 success, 1 usage error, 2 data error,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Tape(_) => 3,
            _ => 2,
        }
    }
}
