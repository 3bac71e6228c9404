use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label {value} at pixel (n={n}, h={h}, w={w}); expected [0, {classes}) or {ignore}")]
    LabelRange {
        n: usize,
        h: usize,
        w: usize,
        value: i64,
        classes: usize,
        ignore: i64,
    },
    #[error("probability map is not normalized: max channel-sum deviation {max_deviation:e}")]
    Normalization { max_deviation: f64 },
    #[error("probability map entry {value} outside [0, 1] at flat index {index}")]
    Range { index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite loss at iteration {iter}: {components}")]
    NonFinite { iter: usize, components: String },
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::LabelRange { .. } => "label_range",
            Error::Normalization { .. } => "normalization",
            Error::Range { .. } => "range",
            Error::Dimension(_) => "dimension",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::NonFinite { .. } => "non_finite",
            Error::Load { .. } => "load",
            Error::Generation(_) => "generation",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
