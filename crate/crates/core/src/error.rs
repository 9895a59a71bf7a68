use thiserror::Error;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthogonality residual {orthogonality:e}, det {det})")]
    NotARotation { orthogonality: f64, det: f64 },

    #[error("unsupported group SO({0}); only SO(3) and SO(5) are supported")]
    UnsupportedGroup(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("representation group mismatch: SO({0}) vs SO({1})")]
    GroupMismatch(usize, usize),

    #[error("channel types do not match layer: {0}")]
    ChannelMismatch(String),

    #[error("grid {grid:?} is not divisible by {factor} (required by network depth)")]
    GridNotDivisible { grid: [usize; 3], factor: usize },

    #[error("sampling mismatch: {0}")]
    SamplingMismatch(String),

    #[error("no b=0 volume present")]
    NoB0,

    #[error("underdetermined spherical harmonic fit: {required} directions required, {available} available")]
    Underdetermined { required: usize, available: usize },

    #[error("singular affine transform")]
    SingularAffine,

    #[error("estimator needs at least 2 samples per set, got {0}")]
    TooFewSamples(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("missing masks: Dice requires an evaluation mask")]
    MissingMask,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
