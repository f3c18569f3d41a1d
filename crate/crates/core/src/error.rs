use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size constraint violated (mismatched grids, indivisible dims, ...).
    #[error("dimension error: {0}")]
    Dim(String),
    /// Invalid scalar argument (out-of-range iteration, non-positive floor, ...).
    #[error("parameter error: {0}")]
    Param(String),
    /// Missing or malformed data (empty manifest, bad checkpoint, absent file).
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite value where a finite one is required (NaN loss, inf output).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
