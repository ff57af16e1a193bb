use lfm_autodiff::AutodiffError;
use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("hypergradient mode mismatch: {0}")]
    Mode(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}
