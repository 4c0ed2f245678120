//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DuaError>;

#[derive(Debug, Error)]
pub enum DuaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("batch normalization needs at least 2 samples per training batch")]
    SingleSampleBatchNorm,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("dataset `{0}` carries no labels")]
    MissingLabels(String),

    #[error("parameter vectors belong to different layouts: {0}")]
    LayoutMismatch(String),

    #[error("invalid mixing weights: {0}")]
    InvalidAlphas(String),

    #[error("task class sets overlap: {0}")]
    ClassOverlap(String),

    #[error("layout has no batch-normalization layers")]
    NoBatchNorm,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("zero variance in correlation input")]
    ZeroVariance,

    #[error("unknown method name `{0}`")]
    UnknownMethod(String),

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("severity {0} outside 1..=5")]
    InvalidSeverity(u8),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("idx file error: {0}")]
    IdxFormat(String),

    #[error("prior does not match the expert set: {0}")]
    PriorMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structured failures of the wire-format decoder. Every one of these is a
/// hard reject: a corrupted message never decodes into a different message.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,

    #[error("unknown schema version {0}")]
    UnknownVersion(u16),

    #[error("truncated message: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },

    #[error("{0} trailing bytes after message end")]
    TrailingBytes(usize),

    #[error("checksum mismatch")]
    ChecksumMismatch,

    #[error("non-finite importance value")]
    NonFiniteValue,

    #[error("negative importance value")]
    NegativeValue,
}
