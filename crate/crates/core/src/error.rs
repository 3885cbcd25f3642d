use thiserror::Error;

use crate::fixture::FixtureError;

/// Errors produced by the attention kernels, diagnostics and tooling.
#[derive(Debug, Error)]
pub enum MhlaError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error(
        "{what} is not divisible into {parts} equal parts; \
         zero-pad the sequence up to {padded} tokens (e.g. 224 -> 256) and retry"
    )]
    NotDivisible {
        what: String,
        parts: usize,
        padded: usize,
    },

    #[error("degenerate normalizer {value:e} at row {row} (below 1e-30); check the feature map")]
    DegenerateNormalizer { row: usize, value: f64 },

    #[error(
        "singular value iteration did not converge after {sweeps} sweeps (residual {residual:e})"
    )]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stream exhausted: block {block_index} requested but the coefficient matrix has {num_blocks} blocks")]
    StreamOverflow {
        block_index: usize,
        num_blocks: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("row {row} is not a probability distribution (sum {sum}, min {min})")]
    NotNormalized { row: usize, sum: f64, min: f64 },

    #[error("sequence length {n} exceeds the materialization cap {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("insufficient points for a scaling fit: {0}")]
    InsufficientPoints(String),

    #[error(transparent)]
    Fixture(#[from] FixtureError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MhlaError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> MhlaError {
    MhlaError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
