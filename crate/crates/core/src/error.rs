use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between two operands.
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Dim {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (non-positive sizes, indivisible groupings, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data content (out-of-range ids, NaN flow, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Operation applied in the wrong state (e.g. transforming a flow twice).
    #[error("state error: {0}")]
    State(String),

    /// Structured file failed to parse; `offset` is the byte position.
    #[error("parse error in {path}: {message} (byte {offset})")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(context: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            context,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
