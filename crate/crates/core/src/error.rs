use std::io;

use thiserror::Error;

/// Errors raised across the library. Each variant maps to one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }

    /// Same error class with `prefix: ` prepended to the message.
    pub fn context(self, prefix: &str) -> Self {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("{}: {}", prefix, m)),
            Error::Config(m) => Error::Config(format!("{}: {}", prefix, m)),
            Error::Numeric(m) => Error::Numeric(format!("{}: {}", prefix, m)),
            Error::Format(m) => Error::Format(format!("{}: {}", prefix, m)),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", prefix, e))),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
#[allow(unused_imports)]
pub(crate) use {config_err, dim_err, format_err, numeric_err};
