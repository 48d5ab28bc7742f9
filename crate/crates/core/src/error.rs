use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("model is not invertible on the bracket: {0}")]
    Invertibility(String),
    #[error("rank deficient system: {0}")]
    RankDeficient(String),
    #[error("sampling too coarse for the system dynamics: {0}")]
    Aliasing(String),
    #[error("sample interval mismatch, resampling required: {0}")]
    ResamplingRequired(String),
    #[error("ill-posed inversion: {0}")]
    IllPosed(String),
    #[error("unstable simulation (spectral abscissa {abscissa:.6e})")]
    Instability { abscissa: f64 },
    #[error("non-finite function value: {0}")]
    NonFinite(String),
    #[error("non-finite evaluation at draw {index}")]
    Evaluation { index: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("capability missing: {0}")]
    Capability(String),
    #[error("segmentation failed for run {run}: {reason}")]
    Segmentation { run: String, reason: String },
    #[error("schema error: missing sensor {sensor}")]
    Schema { sensor: String },
    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
