use thiserror::Error;

use crate::model::GadState;

pub type GadResult<T> = Result<T, GadError>;

#[derive(Debug, Error)]
pub enum GadError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("direction pair is degenerate: (w, v) = {value:e} after normalizing v")]
    DegenerateDuality { value: f64 },

    #[error("direction vector has zero or non-finite norm")]
    ZeroDirection,

    #[error("field evaluation failed: {0}")]
    Evaluation(String),

    #[error("{0}")]
    Capability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("projection onto the (v1, v2) plane is near singular (det = {det:e}); v2 is nearly parallel to v1")]
    NearSingularProjection { det: f64 },

    #[error("eigenvalues must be distinct; closest pair differs by {gap:e}")]
    DegenerateEigenvalue { gap: f64 },

    #[error(
        "trajectory diverged at step {step} (|x|_inf = {norm:e}); reinitialize the initial position or the direction"
    )]
    Divergence {
        step: usize,
        norm: f64,
        last_state: Box<GadState>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Non-fatal conditions attached to results rather than raised.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The two smallest Hessian eigenvalues are within the tie tolerance.
    DegenerateEigenvalue { gap: f64 },
    /// Some eigenvalues have real part too close to zero to classify.
    MarginalSpectrum { count: usize },
}
