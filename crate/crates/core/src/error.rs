use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("channel length mismatch: channel {channel} has {found} samples, expected {expected}")]
    DimensionMismatch {
        channel: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite sample in channel {channel} at index {index}")]
    DataCorruption { channel: usize, index: usize },
    #[error("gzip decode error in {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("channel {channel} is degenerate (zero MAD)")]
    DegenerateChannel { channel: usize },
    #[error("no event survived cutting")]
    EmptySample,
    #[error("point-wise MAD never exceeds the noise level {noise_level}")]
    NoSignal { noise_level: f64 },
    #[error("template has zero derivative energy")]
    FlatTemplate,
    #[error("cluster {cluster} has {count} events, at least {required} are required")]
    TooFewEvents {
        cluster: usize,
        count: usize,
        required: usize,
    },
    #[error("{what} parse error at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::Parameter(message.into())
    }
}
