use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("incompatible file: {0}")]
    Compatibility(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("image codec: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::Error::Argument(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::Error::Format(format!($($arg)*)) };
}
pub(crate) use {arg_err, format_err, shape_err};
