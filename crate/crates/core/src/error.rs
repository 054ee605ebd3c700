use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, channel plans or parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN or infinity produced by a forward op or a loss.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed checkpoint, config or image file.
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
pub(crate) use {config_err, format_err, usage_err};
