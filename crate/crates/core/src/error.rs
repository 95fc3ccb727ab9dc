use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),

    #[error("exponent {exponent} outside codebook range [{min}, {max}]")]
    ExponentOutOfRange { exponent: i32, min: i32, max: i32 },

    #[error("invalid weight code: {0}")]
    InvalidCode(String),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("zero running variance in batch-norm layer {layer}")]
    ZeroVariance { layer: usize },

    #[error("invalid fixed-point format Q{total_bits}/{frac_bits}: {reason}")]
    FixedFormat {
        total_bits: u32,
        frac_bits: u32,
        reason: &'static str,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown report format `{0}`")]
    UnknownReportFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    /// Short machine-friendly category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::ExponentOutOfRange { .. } | Error::InvalidCode(_) => "code",
            Error::InvalidCodebook(_) => "codebook",
            Error::Shape(_) => "shape",
            Error::Network(_) | Error::UnknownPreset(_) | Error::UnknownVariant(_) => "network",
            Error::EmptyBatch | Error::EmptySplit(_) => "empty",
            Error::NonFiniteLoss { .. } => "diverged",
            Error::Config(_) | Error::FixedFormat { .. } => "config",
            Error::Unsupported(_) => "unsupported",
            Error::ZeroVariance { .. } => "batchnorm",
            Error::Format { .. } => "format",
            Error::Dataset(_) | Error::Csv(_) => "dataset",
            Error::UnknownReportFormat(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
