use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the tensor engine, model builders, data loaders and
/// the training pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimensions do not satisfy an operation's contract.
    Shape(String),
    /// A builder or hyperparameter value is invalid.
    Config(String),
    /// A dataset file or label violates its format.
    Data(String),
    /// A checkpoint or sidecar file is malformed.
    Format(String),
    /// Training diverged (non-finite loss) or another numeric contract broke.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Shorthand for `Err(Error::Shape(format!(...)))` used across op builders.
macro_rules! shape_err {
    ($($arg:tt)*) => { return Err($crate::error::Error::Shape(format!($($arg)*))) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { return Err($crate::error::Error::Config(format!($($arg)*))) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { return Err($crate::error::Error::Data(format!($($arg)*))) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { return Err($crate::error::Error::Format(format!($($arg)*))) };
}

pub(crate) use {config_err, data_err, format_err, shape_err};
