use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("expected a 3-D volume, got {found} dimensions")]
    Dimension { found: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("slice range [{lo}, {hi}) exceeds extent {extent}")]
    Range { lo: usize, hi: usize, extent: usize },
    #[error("sequence of {len} slices cannot host a {in_len}-{out_len} window")]
    TooShort {
        len: usize,
        in_len: usize,
        out_len: usize,
    },
    #[error("subject leakage: {0}")]
    Leakage(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("anomaly region {0} lies outside the grid")]
    Region(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("self-attention needs at least 8 channels, got {0}")]
    Channel(usize),
    #[error("unknown attention anchor `{0}`")]
    Placement(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cosine distance undefined for a zero-norm stack")]
    ZeroNorm,
    #[error("empty input: {0}")]
    EmptyData(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: usize, what: String },
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("plane {0} missing from fusion input")]
    MissingPlane(String),
    #[error("no layer named `{0}`")]
    Layer(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format { .. } => "FORMAT_ERROR",
            Error::Dimension { .. } => "DIMENSION_ERROR",
            Error::NonFinite(_) => "NONFINITE_ERROR",
            Error::Range { .. } => "RANGE_ERROR",
            Error::TooShort { .. } => "TOO_SHORT",
            Error::Leakage(_) => "LEAKAGE_ERROR",
            Error::Spec(_) => "SPEC_ERROR",
            Error::Region(_) => "REGION_ERROR",
            Error::Geometry(_) => "GEOMETRY_ERROR",
            Error::Channel(_) => "CHANNEL_ERROR",
            Error::Placement(_) => "PLACEMENT_ERROR",
            Error::Shape(_) => "SHAPE_ERROR",
            Error::ZeroNorm => "ZERO_NORM_ERROR",
            Error::EmptyData(_) => "EMPTY_DATA_ERROR",
            Error::Divergence { .. } => "DIVERGENCE_ERROR",
            Error::SingleClass => "SINGLE_CLASS_ERROR",
            Error::MissingPlane(_) => "MISSING_PLANE_ERROR",
            Error::Layer(_) => "LAYER_ERROR",
            Error::Config(_) => "CONFIG_ERROR",
            Error::Checkpoint(_) => "CHECKPOINT_ERROR",
            Error::Io(_) => "IO_ERROR",
            Error::Json(_) => "FORMAT_ERROR",
            Error::Csv(_) => "FORMAT_ERROR",
            Error::Image(_) => "FORMAT_ERROR",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Placement(_) | Error::Channel(_) | Error::Spec(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
