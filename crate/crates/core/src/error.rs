use thiserror::Error;

use crate::modelio::FormatError;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated by the caller (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A runtime input (label, timestep, ...) is out of range.
    #[error("input error: {0}")]
    Input(String),

    /// A value cannot be encoded in the requested representation.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Calibration loss became non-finite.
    #[error("calibration diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
