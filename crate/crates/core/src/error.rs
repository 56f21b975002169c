use std::path::PathBuf;

/// Errors produced by the prediction network, its training loop and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or resolutions that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API was driven in an order or state it does not allow.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Caller-supplied input that cannot be used (bad config value, too few frames, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A loss or score became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use {contract_err, dim_err, input_err};
