use thiserror::Error;

/// Errors produced by the learning, simulation and certification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered while evaluating {context} at state {state:?}")]
    NonFinite { context: &'static str, state: Vec<f64> },

    #[error("state {state:?} lies outside the state-space bounds")]
    OutOfBounds { state: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("quadratic form is not positive semidefinite (value {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (spectral radius of A: {spectral_radius:.6})"
    )]
    DareNotConverged { iterations: usize, spectral_radius: f64 },

    #[error("closed loop A - BK is not stable (spectral radius {0:.6}); (A, B) is not stabilizable")]
    NotStabilizable(f64),

    #[error("constraints infeasible: violation {violation:e} remains at grid point {point:?} (index {index}) after {iterations} outer iterations")]
    Infeasible { index: usize, point: Vec<f64>, violation: f64, iterations: usize },

    #[error("non-finite objective during line search at outer iteration {outer}, inner iteration {inner}; objective trace: {trace:?}")]
    LineSearchNaN { outer: usize, inner: usize, trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
