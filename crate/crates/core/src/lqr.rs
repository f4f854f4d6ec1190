//! Ground truth for the linear-quadratic benchmark: discrete algebraic Riccati
//! equation, optimal gain and the quadratic optimal value function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::policy::ScalarField;
use crate::rng;
use crate::systems::{ControlAffineSystem, Trajectory};

pub const DARE_TOLERANCE: f64 = 1e-12;
pub const DARE_MAX_ITERATIONS: usize = 100_000;

/// Linear dynamics `x⁺ = A x + B u` with stage cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Discount in `(0, 1]`.
    pub gamma: f64,
}

impl LqrProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if !a.is_square() {
            return Err(Error::InvalidInput("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
        }
        if q.shape() != (n, n) {
            return Err(Error::DimensionMismatch { expected: n, got: q.nrows() });
        }
        if r.shape() != (m, m) {
            return Err(Error::DimensionMismatch { expected: m, got: r.nrows() });
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("discount must lie in (0, 1], got {gamma}")));
        }
        if (&q - q.transpose()).amax() > 1e-12 || q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
            return Err(Error::InvalidInput("Q must be symmetric positive semidefinite".into()));
        }
        if (&r - r.transpose()).amax() > 1e-12 || r.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("R must be symmetric positive definite".into()));
        }
        Ok(Self { a, b, q, r, gamma })
    }

    /// `A = [1 0.1; 0 0.9]`, `B = I`, `Q = diag(1, 0.5)`, `R = 15 I`, undiscounted.
    pub fn benchmark() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]),
            DMatrix::identity(2, 2) * 15.0,
            1.0,
        )
        .expect("static problem")
    }

    fn gain_for(&self, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let g = self.gamma;
        let btp = self.b.transpose() * p;
        let s = &self.r + &btp * &self.b * g;
        let chol = s.cholesky()?;
        Some(chol.solve(&(btp * &self.a)) * g)
    }

    /// `‖γAᵀPA - P - γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA + Q‖_∞` (max-abs entry).
    pub fn residual(&self, p: &DMatrix<f64>) -> f64 {
        let g = self.gamma;
        let Some(k) = self.gain_for(p) else { return f64::INFINITY };
        // γAᵀPB (R + γBᵀPB)⁻¹ γBᵀPA = AᵀPB · γK
        let correction = self.a.transpose() * p * &self.b * &k * g;
        let res = self.a.transpose() * p * &self.a * g - p - correction + &self.q;
        res.amax()
    }
}

/// Solution of the Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// Optimal feedback `u = -K x`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub closed_loop_spectral_radius: f64,
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Fixed-point Riccati iteration from `P = Q` until successive iterates differ
/// by less than [`DARE_TOLERANCE`] in max-abs norm.
pub fn solve_dare(problem: &LqrProblem) -> Result<DareSolution> {
    let g = problem.gamma;
    let diverged =
        || Error::DareNotConverged { iterations: DARE_MAX_ITERATIONS, spectral_radius: spectral_radius(&problem.a) };
    let mut p = problem.q.clone();
    for iteration in 1..=DARE_MAX_ITERATIONS {
        let k = problem.gain_for(&p).ok_or_else(diverged)?;
        let next =
            problem.a.transpose() * &p * &problem.a * g - problem.a.transpose() * &p * &problem.b * &k * g + &problem.q;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e150 {
            return Err(Error::DareNotConverged {
                iterations: iteration,
                spectral_radius: spectral_radius(&problem.a),
            });
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta < DARE_TOLERANCE {
            let k = problem.gain_for(&p).ok_or_else(diverged)?;
            let rho = spectral_radius(&((&problem.a - &problem.b * &k) * g.sqrt()));
            if rho >= 1.0 {
                return Err(Error::NotStabilizable(rho));
            }
            return Ok(DareSolution { p, k, iterations: iteration, closed_loop_spectral_radius: rho });
        }
    }
    Err(diverged())
}

/// `V*(x) = xᵀ P x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    p: DMatrix<f64>,
}

pub fn quadratic_value(p: DMatrix<f64>) -> QuadraticValue {
    QuadraticValue { p }
}

impl QuadraticValue {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }
}

impl ScalarField for QuadraticValue {
    fn dim(&self) -> usize {
        self.p.nrows()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x + self.p.tr_mul(x)
    }
}

/// One-step demonstration `(x, step(x, -Kx))`.
pub fn lqr_demonstration(
    system: &ControlAffineSystem,
    k: &DMatrix<f64>,
    x: DVector<f64>,
    id: String,
) -> Result<Trajectory> {
    let u = -(k * &x);
    let next = system.step(&x, &u)?;
    Trajectory::new(id, vec![x, next], Some(vec![u]))
}

/// One-step demonstrations from `n_points` states drawn uniformly in the box.
pub fn generate_demonstrations(
    system: &ControlAffineSystem,
    k: &DMatrix<f64>,
    n_points: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_points == 0 {
        return Err(Error::InvalidInput("at least one demonstration point is required".into()));
    }
    let mut rng = rng::stream(seed, "lqr-demonstrations", 0);
    (0..n_points)
        .map(|i| {
            let x = system.bounds().sample(&mut rng);
            lqr_demonstration(system, k, x, format!("demo-{i}"))
        })
        .collect()
}
