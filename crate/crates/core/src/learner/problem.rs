//! Precomputed form of the discretised Lyapunov-constrained regression.
//!
//! With `π̂(x) = -β g(x)ᵀ ∇V(f(x))` and `∇V(y) = G(y) α`, the closed-loop
//! next state is affine in the weights:
//! `x⁺(α) = f(x) + J(x) α` with `J(x) = -β g(x) g(x)ᵀ G(f(x))`.
//! Prediction errors are therefore affine in `α` and the objective is
//! quadratic, while each decrease constraint is a smooth function of `α`
//! evaluated at fixed (common random number) noise draws.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::decrease::{expected_decrease, noise_draws};
use super::grid::StabilityGrid;
use super::{LearnerConfig, LossWeighting};
use crate::error::{Error, Result};
use crate::kernel::{Kernel, RkhsFunction};
use crate::systems::{ControlAffineSystem, PerturbationModel, Trajectory};

/// Noise stream used for the training constraints.
pub const CONSTRAINT_STREAM: &str = "constraint";

struct TransitionTerm {
    /// `x_t - f(x_{t-1})`
    residual: DVector<f64>,
    jac: DMatrix<f64>,
    weight: DMatrix<f64>,
}

struct GridTerm {
    point: DVector<f64>,
    drift: DVector<f64>,
    jac: DMatrix<f64>,
    /// `k(z_j, x̂_i)` for all centers.
    kernel_at_point: DVector<f64>,
    /// `g(x̂_i) √Σ(x̂_i) ω_s`
    offsets: Vec<DVector<f64>>,
    draws: Vec<DVector<f64>>,
}

/// Kind of the `i`-th constraint `c_i(α) ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `E[ΔV(x̂_i)] + tightening + margin_eps ≤ 0`
    Decrease(usize),
    /// `E[ΔV(x̂*)] ≤ 0`
    EquilibriumDecrease(usize),
    /// `V(x̂*) - V(x̂_i) ≤ 0`
    Minimum(usize),
}

impl ConstraintKind {
    pub fn grid_index(self) -> usize {
        match self {
            ConstraintKind::Decrease(i) | ConstraintKind::EquilibriumDecrease(i) | ConstraintKind::Minimum(i) => i,
        }
    }
}

pub struct RegressionProblem {
    system: ControlAffineSystem,
    pm: PerturbationModel,
    beta: f64,
    lambda: f64,
    margin_eps: f64,
    template: RkhsFunction,
    gram: DMatrix<f64>,
    num_data_centers: usize,
    transitions: Vec<TransitionTerm>,
    grid_terms: Vec<GridTerm>,
    equilibrium_index: usize,
    constraints: Vec<ConstraintKind>,
}

/// Demonstration states that become kernel centers: the source state of
/// every transition, in data order.
pub fn data_centers(data: &[Trajectory]) -> Vec<DVector<f64>> {
    data.iter().flat_map(|t| t.transitions().map(|(x, _)| x.clone())).collect()
}

impl RegressionProblem {
    pub fn new(
        data: &[Trajectory],
        system: &ControlAffineSystem,
        grid: &StabilityGrid,
        config: &LearnerConfig,
        kernel: &Kernel,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("no demonstrations".into()));
        }
        for t in data {
            t.validate(system)?;
        }
        let sources = data_centers(data);
        if sources.is_empty() {
            return Err(Error::InvalidInput("demonstrations contain no transitions".into()));
        }
        if grid.is_empty() {
            return Err(Error::InvalidInput("empty stability grid".into()));
        }
        if let Some(p) = grid.points.iter().find(|p| p.len() != system.state_dim()) {
            return Err(Error::DimensionMismatch { expected: system.state_dim(), got: p.len() });
        }
        let num_data_centers = sources.len();
        let centers: Vec<DVector<f64>> = sources.iter().chain(grid.points.iter()).cloned().collect();
        let m = centers.len();
        let template = RkhsFunction::new(kernel.clone(), &centers, DVector::zeros(m))?;
        let gram = template.gram();
        let pm = config.perturbation(system)?;
        let beta = config.beta;
        let lambda = config.lambda_for(num_data_centers, grid.len());

        let jacobian = |x: &DVector<f64>, fx: &DVector<f64>| -> DMatrix<f64> {
            let g = system.input_gain(x);
            (&g * g.transpose()) * template.kernel_gradients(fx) * -beta
        };

        let mut warned = false;
        let transitions = data
            .iter()
            .flat_map(|t| t.transitions())
            .map(|(prev, next)| {
                let fx = system.drift(prev);
                let weight = transition_weight(config.weighting, &pm, system, prev, &mut warned);
                TransitionTerm { residual: next - &fx, jac: jacobian(prev, &fx), weight }
            })
            .collect();

        let grid_terms = grid
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let fx = system.drift(x);
                let draws = noise_draws(
                    config.rng_seed,
                    CONSTRAINT_STREAM,
                    i as u64,
                    config.mc_samples,
                    system.input_dim(),
                    &pm,
                );
                let offsets = if pm.is_zero() {
                    vec![DVector::zeros(system.state_dim())]
                } else {
                    let spread = system.input_gain(x) * pm.sqrt_covariance(x, system.input_dim())?;
                    draws.iter().map(|w| &spread * w).collect()
                };
                Ok(GridTerm {
                    point: x.clone(),
                    jac: jacobian(x, &fx),
                    drift: fx,
                    kernel_at_point: template.kernel_vector(x),
                    offsets,
                    draws,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let eq = grid.equilibrium_index;
        let mut constraints: Vec<ConstraintKind> = (0..grid.len())
            .map(|i| if i == eq { ConstraintKind::EquilibriumDecrease(i) } else { ConstraintKind::Decrease(i) })
            .collect();
        constraints.extend((0..grid.len()).filter(|i| *i != eq).map(ConstraintKind::Minimum));

        Ok(Self {
            system: system.clone(),
            pm,
            beta,
            lambda,
            margin_eps: config.margin_eps,
            template,
            gram,
            num_data_centers,
            transitions,
            grid_terms,
            equilibrium_index: eq,
            constraints,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.template.num_centers()
    }

    pub fn num_data_centers(&self) -> usize {
        self.num_data_centers
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn perturbation(&self) -> &PerturbationModel {
        &self.pm
    }

    pub fn system(&self) -> &ControlAffineSystem {
        &self.system
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn constraints(&self) -> &[ConstraintKind] {
        &self.constraints
    }

    pub fn grid_point(&self, i: usize) -> &DVector<f64> {
        &self.grid_terms[i].point
    }

    /// The RKHS function with weights `alpha` on this problem's centers.
    pub fn function(&self, alpha: &DVector<f64>) -> RkhsFunction {
        self.template.with_weights(alpha.clone())
    }

    fn check_len(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.num_weights() {
            return Err(Error::DimensionMismatch { expected: self.num_weights(), got: alpha.len() });
        }
        Ok(())
    }

    /// `Σ êᵀ Γ ê + λ αᵀ K α`.
    pub fn loss(&self, alpha: &DVector<f64>) -> Result<f64> {
        self.check_len(alpha)?;
        Ok(self.fit_term(alpha) + self.lambda * alpha.dot(&(&self.gram * alpha)))
    }

    /// Weighted squared prediction error without the regulariser.
    pub fn fit_term(&self, alpha: &DVector<f64>) -> f64 {
        self.transitions
            .iter()
            .map(|t| {
                let e = &t.residual - &t.jac * alpha;
                e.dot(&(&t.weight * &e))
            })
            .sum()
    }

    pub fn loss_and_gradient(&self, alpha: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_len(alpha)?;
        let k_alpha = &self.gram * alpha;
        let mut value = self.lambda * alpha.dot(&k_alpha);
        let mut grad = k_alpha * (2.0 * self.lambda);
        for t in &self.transitions {
            let e = &t.residual - &t.jac * alpha;
            let we = &t.weight * &e;
            value += e.dot(&we);
            grad -= t.jac.tr_mul(&we) * 2.0;
        }
        Ok((value, grad))
    }

    /// Constant Hessian of the objective, `2 Σ JᵀΓJ + 2λK`.
    pub fn loss_hessian(&self) -> DMatrix<f64> {
        let mut h = &self.gram * (2.0 * self.lambda);
        for t in &self.transitions {
            h += t.jac.tr_mul(&(&t.weight * &t.jac)) * 2.0;
        }
        h
    }

    /// `E[ΔV(x̂_i)]` and its gradient with respect to `α`.
    fn decrease_term(&self, i: usize, f: &RkhsFunction) -> (f64, DVector<f64>) {
        let term = &self.grid_terms[i];
        let next = &term.drift + &term.jac * f.weights();
        let count = term.offsets.len() as f64;
        let mut value = 0.0;
        let mut grad = DVector::zeros(self.num_weights());
        for off in &term.offsets {
            let p = &next + off;
            let (kvec, v, g) = f.kernel_vector_value_gradient(&p);
            value += v;
            grad += kvec + term.jac.tr_mul(&g);
        }
        value = value / count - term.kernel_at_point.dot(f.weights());
        grad = grad / count - &term.kernel_at_point;
        (value, grad)
    }

    fn constraint_term(&self, kind: ConstraintKind, f: &RkhsFunction, tightening: f64) -> (f64, DVector<f64>) {
        match kind {
            ConstraintKind::Decrease(i) => {
                let (v, g) = self.decrease_term(i, f);
                (v + tightening + self.margin_eps, g)
            }
            ConstraintKind::EquilibriumDecrease(i) => self.decrease_term(i, f),
            ConstraintKind::Minimum(i) => {
                let g = &self.grid_terms[self.equilibrium_index].kernel_at_point - &self.grid_terms[i].kernel_at_point;
                (g.dot(f.weights()), g)
            }
        }
    }

    /// All constraint values `c_i(α)` (feasible when `≤ 0`) with gradients,
    /// in the order of [`Self::constraints`].
    pub fn constraints_and_gradients(&self, alpha: &DVector<f64>, tightening: f64) -> Result<Vec<(f64, DVector<f64>)>> {
        self.check_len(alpha)?;
        let f = self.function(alpha);
        Ok(self.constraints.par_iter().map(|kind| self.constraint_term(*kind, &f, tightening)).collect())
    }

    pub fn constraint_values(&self, alpha: &DVector<f64>, tightening: f64) -> Result<Vec<f64>> {
        Ok(self.constraints_and_gradients(alpha, tightening)?.into_iter().map(|(v, _)| v).collect())
    }

    /// `E[ΔV]` at every grid point through the generic evaluation path, with
    /// the training noise draws.
    pub fn expected_decrease_at_grid(&self, alpha: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_len(alpha)?;
        let f = self.function(alpha);
        self.grid_terms
            .par_iter()
            .map(|t| expected_decrease(&f, &t.point, &self.system, &self.pm, self.beta, &t.draws))
            .collect()
    }
}

fn transition_weight(
    weighting: LossWeighting,
    pm: &PerturbationModel,
    system: &ControlAffineSystem,
    x: &DVector<f64>,
    warned: &mut bool,
) -> DMatrix<f64> {
    let n = system.state_dim();
    if weighting == LossWeighting::Identity || pm.is_zero() {
        return DMatrix::identity(n, n);
    }
    let g = system.input_gain(x);
    let cov = &g * pm.covariance(x, system.input_dim()) * g.transpose();
    let inverse = cov.cholesky().map(|c| c.inverse()).filter(|w| w.iter().all(|v| v.is_finite()));
    match inverse {
        Some(w) => w,
        None => {
            if !*warned {
                log::warn!(
                    "next-state covariance is singular at {:?}; using identity weighting for such transitions",
                    x.as_slice()
                );
                *warned = true;
            }
            DMatrix::identity(n, n)
        }
    }
}
