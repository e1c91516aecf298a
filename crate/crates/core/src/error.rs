use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Every code is zero, so no positive scale can be fitted.
    #[error("degenerate codes: {0}")]
    DegenerateCodes(String),

    #[error("divergence in round {round}: loss is {loss} (learning rate too high?)")]
    Divergence { round: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("length error: {0}")]
    Length(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateCodes(_) => "degenerate_codes",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::VersionMismatch { .. } => "version",
            Error::Length(_) => "length",
            Error::Consistency(_) => "consistency",
            Error::Validation(_) => "validation",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
