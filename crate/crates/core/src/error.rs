use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FateError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every trainable parameter")]
    DetachedLoss,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` is frozen")]
    FrozenParameter(String),

    #[error("optimizer schedule exhausted: step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("zero vector has no direction (row {row})")]
    ZeroVector { row: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {classes} classes (sample {index})")]
    LabelOutOfRange {
        label: i64,
        classes: usize,
        index: usize,
    },

    #[error("class `{name}` has {available} samples, needs at least {needed}")]
    ClassTooSmall {
        name: String,
        available: usize,
        needed: usize,
    },

    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),

    #[error("auxiliary and downstream classes overlap: {0:?}")]
    ClassOverlap(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FateError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FateError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used by the CLI's machine-parsable error line.
    pub fn code(&self) -> &'static str {
        match self {
            FateError::Shape(_) => "shape",
            FateError::NonFinite { .. } => "non_finite",
            FateError::NonScalarLoss(_) => "non_scalar_loss",
            FateError::DetachedLoss => "detached_loss",
            FateError::UnknownParameter(_) => "unknown_parameter",
            FateError::FrozenParameter(_) => "frozen_parameter",
            FateError::ScheduleExhausted { .. } => "schedule_exhausted",
            FateError::ZeroVector { .. } => "zero_vector",
            FateError::Invalid(_) => "invalid_argument",
            FateError::MalformedHeader { .. } => "malformed_header",
            FateError::Truncated { .. } => "truncated_file",
            FateError::LabelOutOfRange { .. } => "label_out_of_range",
            FateError::ClassTooSmall { .. } => "class_too_small",
            FateError::OutOfVocabulary(_) => "out_of_vocabulary",
            FateError::ClassOverlap(_) => "class_overlap",
            FateError::Config(_) => "config",
            FateError::Missing(_) => "missing_prerequisite",
            FateError::Io { .. } => "io",
            FateError::Image(_) => "image",
            FateError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = FateError> = std::result::Result<T, E>;
