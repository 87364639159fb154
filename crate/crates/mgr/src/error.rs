//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum MgrError {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Invalid configuration (bad field, bad combination, bad init domain).
    Config(String),
    /// Corpus / dataset problems.
    Data(String),
    /// API misuse (e.g. backward twice on one tape).
    Usage(String),
    /// Checkpoint or report file format problems.
    Format(String),
    /// Numerical failure (non-finite loss, invariant violation in checked mode).
    Numeric(String),
    /// Operation incompatible with the model wiring.
    Wiring(String),
    /// Operation incompatible with the growth/lerping stage.
    Stage(String),
    Io(std::io::Error),
}

impl fmt::Display for MgrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MgrError::Shape(m) => write!(f, "shape error: {m}"),
            MgrError::Config(m) => write!(f, "config error: {m}"),
            MgrError::Data(m) => write!(f, "data error: {m}"),
            MgrError::Usage(m) => write!(f, "usage error: {m}"),
            MgrError::Format(m) => write!(f, "format error: {m}"),
            MgrError::Numeric(m) => write!(f, "numeric error: {m}"),
            MgrError::Wiring(m) => write!(f, "wiring error: {m}"),
            MgrError::Stage(m) => write!(f, "stage error: {m}"),
            MgrError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for MgrError {}

impl From<std::io::Error> for MgrError {
    fn from(e: std::io::Error) -> Self {
        MgrError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, MgrError>;
