use thiserror::Error;

/// Errors produced by the pooling, decoding, fusion and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("soft mask has zero effective weight")]
    ZeroEffectiveWeight,
    #[error("support images contain no background pixels")]
    EmptyBackground,
    #[error("zero-norm vector cannot be compared by cosine")]
    ZeroVector,
    #[error("distance set is degenerate (all values equal)")]
    DegenerateSet,
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    DivergenceDetected { iteration: usize, loss: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
