//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series too short: {len} samples, window needs {window_len}")]
    SeriesTooShort { len: usize, window_len: usize },

    #[error("window too short: {len} samples, STFT segment needs {seg_len}")]
    WindowTooShort { len: usize, seg_len: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("empty calibration set")]
    EmptyCalibrationSet,

    #[error("empty outcome set")]
    EmptySet,

    #[error("outcomes contain only one class, AUC undefined")]
    OneClassOnly,

    #[error("{metric} undefined: denominator is zero")]
    UndefinedMetric { metric: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
