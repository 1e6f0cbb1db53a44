use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failure categories shared by every layer of the core crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shapes, channel counts or hyperparameters that cannot work together.
    Config(String),
    /// Caller-supplied data outside its domain (labels, non-scalar loss, ...).
    Input(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// Broken internal bookkeeping, e.g. a node id from another tape.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Numeric(m) => write!(f, "numerical error: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use input_err;
