//! Discrete-time control-affine systems `x⁺ = f(x) + g(x)·u` on a box-bounded
//! state space, their stochastic perturbation model and closed-loop rollouts.

mod perturbation;
mod trajectory;

pub use perturbation::{sample_perturbed_action, CovarianceModel, PerturbationModel, PerturbedAction, SqrtMode};
pub use trajectory::{simulate, simulate_until, Policy, Rollout, Trajectory};

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]` in state space.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.is_empty() {
            return Err(Error::InvalidInput("bounds must have at least one axis".into()));
        }
        for (l, u) in lower.iter().zip(upper.iter()) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::InvalidInput(format!("degenerate bounds on axis: [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The square `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(self.upper.iter())).all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn largest_side(&self) -> f64 {
        (&self.upper - &self.lower).max()
    }

    /// Uniform sample from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(self.upper.iter()).map(|(l, u)| l + (u - l) * rng.random::<f64>()),
        )
    }
}

/// The pair `(f, g)` of a control-affine system.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_gain(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `f(x) = A x`, `g(x) = B`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn input_gain(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
}

/// Two-dimensional goal-reaching benchmark with attracting drift towards the
/// centre of the box and a state-dependent scalar input gain.
#[derive(Debug, Clone, Copy, Default)]
pub struct NonlinearBenchmark;

impl NonlinearBenchmark {
    /// `s(x) = (2 / (1 + exp(x - 2.5)) - 1) sin²(πx/5)`
    pub fn s(x: f64) -> f64 {
        (2.0 / (1.0 + (x - 2.5).exp()) - 1.0) * (PI * x / 5.0).sin().powi(2)
    }

    fn gain(x: &DVector<f64>) -> f64 {
        2.0 - (PI * x[1] / 5.0).cos().powi(2) * (PI * x[0] / 5.0).sin().powi(2)
    }
}

impl Dynamics for NonlinearBenchmark {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![x1 * (1.0 + Self::s(x1)), x2 * (1.0 + Self::s(x2) * (PI * x2 / 5.0).cos().powi(2))])
    }

    fn input_gain(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * Self::gain(x)
    }
}

/// A control-affine system together with its state-space box and target.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    name: String,
    state_dim: usize,
    input_dim: usize,
    dynamics: Arc<dyn Dynamics>,
    bounds: BoxBounds,
    target: DVector<f64>,
}

impl ControlAffineSystem {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        dynamics: Arc<dyn Dynamics>,
        bounds: BoxBounds,
        target: DVector<f64>,
    ) -> Result<Self> {
        let state_dim = bounds.dim();
        if input_dim == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        if target.len() != state_dim {
            return Err(Error::DimensionMismatch { expected: state_dim, got: target.len() });
        }
        if !bounds.contains(&target) {
            return Err(Error::InvalidInput(format!("target {:?} lies outside the bounds", target.as_slice())));
        }
        let system = Self { name: name.into(), state_dim, input_dim, dynamics, bounds, target };
        // spot-check the maps at the target and at the two extreme corners
        for x in [system.target.clone(), system.bounds.lower.clone(), system.bounds.upper.clone()] {
            let f = system.drift(&x);
            let g = system.input_gain(&x);
            if f.len() != state_dim {
                return Err(Error::DimensionMismatch { expected: state_dim, got: f.len() });
            }
            if g.nrows() != state_dim || g.ncols() != input_dim {
                return Err(Error::DimensionMismatch { expected: state_dim * input_dim, got: g.len() });
            }
            if !f.iter().chain(g.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { context: "system maps", state: x.as_slice().to_vec() });
            }
        }
        Ok(system)
    }

    /// Linear system `x⁺ = A x + B u`.
    pub fn linear(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        bounds: BoxBounds,
        target: DVector<f64>,
    ) -> Result<Self> {
        if !a.is_square() || a.nrows() != bounds.dim() {
            return Err(Error::DimensionMismatch { expected: bounds.dim(), got: a.nrows() });
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
        }
        let m = b.ncols();
        Self::new(name, m, Arc::new(LinearDynamics { a, b }), bounds, target)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics.drift(x)
    }

    pub fn input_gain(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.input_gain(x)
    }

    /// One transition `f(x) + g(x) u`. The result is not clamped to the box.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch { expected: self.state_dim, got: x.len() });
        }
        if u.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: u.len() });
        }
        if !self.bounds.contains(x) {
            return Err(Error::OutOfBounds { state: x.as_slice().to_vec() });
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "input", state: x.as_slice().to_vec() });
        }
        let next = self.drift(x) + self.input_gain(x) * u;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "step", state: x.as_slice().to_vec() });
        }
        Ok(next)
    }
}

/// The linear-quadratic benchmark: `A = [1 0.1; 0 0.9]`, `B = I` on `[-5, 5]²`
/// with target at the origin.
pub fn builtin_lqr_system() -> ControlAffineSystem {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
    let b = DMatrix::identity(2, 2);
    let bounds = BoxBounds::cube(2, -5.0, 5.0).expect("static bounds");
    ControlAffineSystem::linear("lqr", a, b, bounds, DVector::zeros(2)).expect("static system")
}

/// Default target of the nonlinear benchmark (bottom-right of the box).
pub const NONLINEAR_DEFAULT_TARGET: [f64; 2] = [5.0, 0.0];

/// The nonlinear goal-reaching benchmark on `[-0.5, 5.5]²`.
pub fn builtin_nonlinear_system(target: Option<DVector<f64>>) -> Result<ControlAffineSystem> {
    let bounds = BoxBounds::cube(2, -0.5, 5.5)?;
    let target = target.unwrap_or_else(|| DVector::from_row_slice(&NONLINEAR_DEFAULT_TARGET));
    ControlAffineSystem::new("nonlinear2d", 2, Arc::new(NonlinearBenchmark), bounds, target)
}
