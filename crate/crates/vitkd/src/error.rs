//! Crate-wide error type and exit-code mapping.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or rank mismatch; message names the offending shapes.
    Shape(String),
    /// Invalid configuration or usage.
    Config(String),
    /// Filesystem / IO failure, with path context where available.
    Io(String),
    /// Malformed on-disk data (bad magic, CRC mismatch, truncation).
    Format(String),
    /// Numeric failure: non-finite loss, gradient audit failure,
    /// degenerate attention (empty key set).
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &str, detail: impl fmt::Display) -> Error {
        Error::Shape(format!("{op}: {detail}"))
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Error {
        Error::Io(format!("{}: {err}", path.display()))
    }

    /// Process exit code contract: 2 config/usage, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}
