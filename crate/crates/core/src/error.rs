use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image did not have the extent an operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    /// A caller broke a documented precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checksum mismatch in record {record} at byte {offset}")]
    Checksum { record: usize, offset: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("geometry resampling exhausted after {0} attempts")]
    Geometry(usize),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
