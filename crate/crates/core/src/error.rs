use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input data: bad arity, unknown columns, non-numeric targets.
    #[error("data error: {0}")]
    Data(String),

    /// A caller-supplied argument or configuration value is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Rows or models that do not agree with the expected schema.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A computation produced NaN or infinity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A model file that cannot be decoded.
    #[error("model format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}

pub(crate) use data_err;
pub(crate) use invalid_arg;
