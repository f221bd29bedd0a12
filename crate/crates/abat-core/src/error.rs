//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("eigendecomposition did not converge: off-diagonal residual {residual:.3e} after {sweeps} sweeps")]
    EigNoConvergence { residual: f64, sweeps: usize },

    #[error("domain {domain}: {source}")]
    Domain { domain: u32, source: Box<Error> },

    #[error("class {0} has no instances")]
    MissingClass(u32),

    #[error("gradient requested for non-differentiable leaf node {0}")]
    NonDifferentiable(usize),

    #[error("gradient is not finite (NaN or Inf) for {0}")]
    GradientNotFinite(String),

    #[error("model is in train mode; prediction requires eval mode (no batch statistics available)")]
    TrainModePredict,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a domain id to an error bubbling out of per-domain processing.
    pub fn in_domain(self, domain: u32) -> Error {
        Error::Domain {
            domain,
            source: Box::new(self),
        }
    }
}
