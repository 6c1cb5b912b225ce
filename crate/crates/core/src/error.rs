use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("masking error: no center yields a partial mask at diameter fraction {fraction}")]
    Masking { fraction: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("resampling error: {0}")]
    Resampling(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("state error: {0}")]
    State(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("no checkpoint available for pre-training configuration `{0}`")]
    MissingCheckpoint(String),
    #[error("non-finite loss at {stage} step {step}: {detail}")]
    Numerical { stage: &'static str, step: usize, detail: String },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
