//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by this crate.
///
/// The variants map onto the CLI exit codes: `Parse`/`Io` are bad input (2),
/// `Contract` and `Domain` are violated call contracts (3).
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument left the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (dimension mismatch, invalid layout, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data (SFF forest files, PGM/PPM images).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
