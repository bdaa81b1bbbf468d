//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content; `line` is 1-based where known.
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Shape disagreement between declared and actual data.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input violates a documented contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller passed an argument outside the operation's domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Factorization or solve failure; carries the pivot report.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A region id was requested that has no cells in the label raster.
    #[error("missing region: no cells labeled for region id(s) {0:?}")]
    MissingRegion(Vec<u32>),

    /// Regions unreachable by any non-key facility; the upwind exposure is
    /// undefined there.
    #[error("degenerate exposure: zero upwind weight for region id(s) {0:?}")]
    DegenerateExposure(Vec<u32>),

    #[error("initialization error: {0}")]
    Initialization(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
