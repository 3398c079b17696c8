use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Exactly one image passed to the exclusion loss is identically zero.
    #[error("degenerate exclusion normalizer: one image is identically zero")]
    DegenerateNormalizer,

    #[error("non-finite training loss at patch {patch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, patch: usize },

    #[error("finite-difference check: loss is not deterministic ({first} vs {second})")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint architecture {found} does not match configuration {expected}")]
    Architecture { found: String, expected: String },

    #[error("bad checkpoint format: {0}")]
    Format(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
