//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a parameter) disagree on shape.
    /// The message names both shapes and where they met.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    /// An argument is outside its documented domain (rates, window sizes,
    /// strides, degenerate extents, bad ranges).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary file does not start with the expected magic/header layout.
    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    /// A binary file declares an unsupported format version.
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u16, supported: u16 },

    /// A binary payload ends before the header-declared length.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A checkpoint's content checksum does not match its payload.
    #[error("checksum mismatch: file is corrupt or was modified")]
    ChecksumMismatch,

    /// CSV or manifest text could not be parsed; names the offending line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Configuration file problems: unknown keys, bad values, missing
    /// required fields.
    #[error("config error: {0}")]
    Config(String),

    /// The training loss became NaN/Inf; names where it happened.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Usage or configuration problem (exit 1).
    Config,
    /// Data, file-format, or shape problem (exit 2).
    Data,
    /// Numerical failure during training (exit 3).
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorClass::Config,
            Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}
