//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    /// Metric evaluation found no pixel passing valid ∧ crop ∧ range.
    #[error("evaluation mask is empty: no valid pixels after crop/range filtering")]
    EmptyMask,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("depth raster: {0}")]
    Raster(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
