use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss} exceeds limit {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },
    #[error("corrupt data at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("no candidate meets target {target} bpp; achievable rates: {achievable:?}")]
    TargetUnreachable { target: f64, achievable: Vec<f64> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
