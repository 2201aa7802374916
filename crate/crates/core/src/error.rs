//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton layout: {0}")]
    InvalidLayout(String),

    #[error("joint count mismatch: expected {expected}, got {got}")]
    JointCountMismatch { expected: usize, got: usize },

    #[error("invalid box: min must be strictly below max on both axes")]
    InvalidBox,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("heatmap shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("heatmap kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: &'static str, got: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty heatmap")]
    EmptyHeatmap,

    #[error("peak outside the heatmap grid")]
    PeakOutsideGrid,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("singular covariance during mixture fitting")]
    SingularCovariance,

    #[error("sampling failed after {0} rejections")]
    SamplingFailed(usize),

    #[error("embedding has zero norm")]
    ZeroNormEmbedding,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("missing head/neck annotation required for PCKh normalization")]
    MissingHeadJoints,

    #[error("duplicate image id {0}")]
    DuplicateImageId(i64),

    #[error("missing frame {0}")]
    MissingFrame(u64),

    #[error("stage {stage} failed on frame {frame}: {message}")]
    Stage { stage: &'static str, frame: u64, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
