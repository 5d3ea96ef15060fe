use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index ({ix}, {iy}) out of range for a {n}x{n} grid")]
    IndexOutOfRange { ix: usize, iy: usize, n: usize },

    #[error("point coincides with the optical center")]
    DegeneratePoint,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("threshold {0} outside the open interval (0, 1)")]
    ThresholdOutOfRange(f64),

    #[error("feature row {row} of the {side} map has zero norm")]
    ZeroNormFeature { side: &'static str, row: usize },

    #[error("projection weights required to map {from} channels to {to}")]
    MissingProjection { from: usize, to: usize },

    #[error("invalid match count {k} (must be in 1..={max})")]
    InvalidMatchCount { k: usize, max: usize },

    #[error("correspondence set has no pair with positive weight")]
    NoPositiveWeight,

    #[error("invalid correspondence: {0}")]
    InvalidCorrespondence(String),

    #[error("no valid patch pairs under the ground-truth pose")]
    NoValidPairs,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("tensor format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
