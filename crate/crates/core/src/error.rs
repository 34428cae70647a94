//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller handed us something that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A spanning tree cannot be built because the graph is not connected.
    #[error("graph is disconnected: node {0} is unreachable")]
    Disconnected(usize),

    /// An optimizer produced or encountered non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
