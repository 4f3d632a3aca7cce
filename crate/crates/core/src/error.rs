//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum EcupError {
    /// A schema field is missing from a CSV header.
    #[error("missing column `{column}` in {path}")]
    MissingColumn { column: String, path: String },

    /// A row has z=1 with y=0, violating the impression -> click -> conversion order.
    #[error("chain violation at row {row}: conversion label is 1 but click label is 0")]
    ChainViolation { row: usize },

    /// A sparse or treatment code is outside its declared cardinality.
    #[error("code out of range at row {row}, field `{field}`: {code} >= cardinality {cardinality}")]
    CodeOutOfRange {
        row: usize,
        field: String,
        code: usize,
        cardinality: usize,
    },

    /// A CSV cell failed to parse.
    #[error("parse error at row {row}, field `{field}`: {message}")]
    ParseError {
        row: usize,
        field: String,
        message: String,
    },

    /// A schema, synthetic spec, or model configuration is inconsistent.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A treated or control group needed for an uplift quantity is empty.
    #[error("empty group: {0}")]
    EmptyGroup(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A NaN or infinity was produced; the offending step is aborted.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Terminal gain of an uplift curve is <= 0, so the normalized score is undefined.
    #[error("degenerate gain: {0}")]
    DegenerateGain(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// A checkpoint does not match the dataset it is evaluated against.
    #[error("schema fingerprint mismatch: checkpoint {expected} vs data {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EcupError>;
