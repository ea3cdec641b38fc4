use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} image, got {actual}")]
    DomainMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image is constant (std {0:e}); cannot z-score")]
    ConstantImage(f64),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid value at pixel {index}: {value}")]
    InvalidValue { index: usize, value: f32 },
    #[error("no body region above the body threshold")]
    NoBody,
    #[error("no rib cage structures found in the body region")]
    NoRibs,
    #[error("mask is empty")]
    EmptyMask,
    #[error("surrounding region is empty (mask covers the whole image)")]
    EmptyRegion,
    #[error("inconsistent phantom spec: {0}")]
    Spec(String),
    #[error("dataset too small: {0}")]
    DatasetSize(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training diverged: {0}")]
    TrainingFailure(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
