//! Constrained kernel regression of a control Lyapunov function from
//! demonstrations.

pub mod decrease;
pub mod grid;
pub mod lipschitz;
pub mod optimizer;
pub mod problem;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use decrease::{expected_decrease, noise_draws};
pub use grid::{build_grid, lattice_points, LatticeSpec, StabilityGrid};
pub use lipschitz::estimate_lipschitz;
pub use optimizer::{SolveTrace, SolverSettings};
pub use problem::{data_centers, ConstraintKind, RegressionProblem, CONSTRAINT_STREAM};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, RkhsFunction};
use crate::policy::ClfPolicy;
use crate::systems::{ControlAffineSystem, PerturbationModel, Trajectory};
use crate::verifier::{CertReport, SeedRecord};

/// How the decrease bound is tightened at non-equilibrium grid points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LipschitzMode {
    /// Use `margin` directly as the tightening.
    Fixed { margin: f64 },
    /// Tighten by `L·ξ` with `L` estimated from the current solution,
    /// re-solving up to `rounds` times until the estimate moves by less than 10%.
    Estimated { safety_factor: f64, rounds: usize },
}

impl Default for LipschitzMode {
    fn default() -> Self {
        LipschitzMode::Estimated { safety_factor: 1.2, rounds: 3 }
    }
}

/// Weight matrix of the one-step prediction errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Inverse next-state covariance `(g Σ gᵀ)⁻¹`; identity where it is zero
    /// or singular.
    #[default]
    InverseCovariance,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Regularisation weight; `None` means `1 / (N·T + N_ξ)`.
    pub lambda: Option<f64>,
    pub beta: f64,
    pub mc_samples: usize,
    /// Standard deviation of the input perturbation far from the target.
    pub mc_sigma: f64,
    /// Length scale over which the perturbation vanishes towards the target.
    pub mc_rho: f64,
    pub lipschitz_mode: LipschitzMode,
    pub weighting: LossWeighting,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub tolerance: f64,
    pub margin_eps: f64,
    pub merit_weight: f64,
    pub rng_seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            beta: 0.2,
            mc_samples: 5,
            mc_sigma: 0.0,
            mc_rho: 1.0,
            lipschitz_mode: LipschitzMode::default(),
            weighting: LossWeighting::default(),
            max_outer_iters: 50,
            max_inner_iters: 500,
            initial_penalty: 10.0,
            penalty_growth: 5.0,
            tolerance: 1e-7,
            margin_eps: 1e-6,
            merit_weight: 1e4,
            rng_seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be a finite nonnegative number, got {l}"));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.mc_sigma >= 0.0 && self.mc_sigma.is_finite()) {
            return bad(format!("mc_sigma must be nonnegative, got {}", self.mc_sigma));
        }
        if !(self.mc_rho > 0.0 && self.mc_rho.is_finite()) {
            return bad(format!("mc_rho must be positive, got {}", self.mc_rho));
        }
        match self.lipschitz_mode {
            LipschitzMode::Fixed { margin } if !(margin >= 0.0) => {
                return bad(format!("fixed margin must be nonnegative, got {margin}"));
            }
            LipschitzMode::Estimated { safety_factor, rounds } if !(safety_factor > 0.0) || rounds == 0 => {
                return bad("estimated mode needs a positive safety factor and at least one round".into());
            }
            _ => {}
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return bad("iteration limits must be positive".into());
        }
        if !(self.initial_penalty > 0.0) {
            return bad(format!("initial_penalty must be positive, got {}", self.initial_penalty));
        }
        if !(self.penalty_growth > 1.0) {
            return bad(format!("penalty_growth must exceed 1, got {}", self.penalty_growth));
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if !(self.margin_eps >= 0.0) {
            return bad(format!("margin_eps must be nonnegative, got {}", self.margin_eps));
        }
        if !(self.merit_weight > 0.0) {
            return bad(format!("merit_weight must be positive, got {}", self.merit_weight));
        }
        Ok(())
    }

    /// `λ`, defaulting to `1 / (num_transitions + num_grid_points)`.
    pub fn lambda_for(&self, num_transitions: usize, num_grid_points: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / (num_transitions + num_grid_points) as f64)
    }

    /// Perturbation model used for training constraints and auditing.
    pub fn perturbation(&self, system: &ControlAffineSystem) -> Result<PerturbationModel> {
        PerturbationModel::vanishing(self.mc_sigma, self.mc_rho, system.target(), self.rng_seed)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            max_outer_iters: self.max_outer_iters,
            max_inner_iters: self.max_inner_iters,
            initial_penalty: self.initial_penalty,
            penalty_growth: self.penalty_growth,
            tolerance: self.tolerance,
            merit_weight: self.merit_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub tightening: f64,
    /// Lipschitz constant behind `tightening` (absent in fixed mode).
    pub lipschitz: Option<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: LearnerConfig,
    pub seed: u64,
    pub lambda: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Trace of the final solve.
    pub trace: SolveTrace,
    pub rounds: Vec<RoundRecord>,
    /// `E[ΔV]` at every grid point with the training noise draws.
    pub final_decrease: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub value: RkhsFunction,
    pub beta: f64,
    /// Grid with the tightening used in the final solve.
    pub grid: StabilityGrid,
    /// Centers `0..num_data_centers` are demonstration states, the rest grid points.
    pub num_data_centers: usize,
    pub certification: CertReport,
    pub training: TrainingMeta,
}

impl LearnedModel {
    pub fn policy<'a>(&'a self, system: &'a ControlAffineSystem) -> Result<ClfPolicy<'a, RkhsFunction>> {
        ClfPolicy::new(&self.value, self.beta, system)
    }

    pub fn tightening(&self) -> f64 {
        self.grid.tightening
    }

    pub fn weights(&self) -> &DVector<f64> {
        self.value.weights()
    }
}

/// Objective value at `alpha` for the problem defined by the inputs.
pub fn loss(
    alpha: &DVector<f64>,
    data: &[Trajectory],
    system: &ControlAffineSystem,
    grid: &StabilityGrid,
    config: &LearnerConfig,
    kernel: &Kernel,
) -> Result<f64> {
    RegressionProblem::new(data, system, grid, config, kernel)?.loss(alpha)
}

/// Learns a CLF from `data` starting at `α = 0`.
pub fn solve(
    data: &[Trajectory],
    system: &ControlAffineSystem,
    grid: &StabilityGrid,
    config: &LearnerConfig,
    kernel: &Kernel,
) -> Result<LearnedModel> {
    kernel.validate()?;
    let problem = RegressionProblem::new(data, system, grid, config, kernel)?;
    let settings = config.solver_settings();
    let zero = DVector::zeros(problem.num_weights());
    let initial_loss = problem.loss(&zero)?;
    let xi = grid.grid_constant;

    let mut rounds = Vec::new();
    let (outcome, tightening, lipschitz) = match config.lipschitz_mode {
        LipschitzMode::Fixed { margin } => {
            let outcome = optimizer::solve_constrained(&problem, margin, zero, &settings)?;
            rounds.push(record(&outcome, margin, None));
            (outcome, margin, None)
        }
        LipschitzMode::Estimated { safety_factor, rounds: max_rounds } => {
            let mut tightening = 0.0;
            let mut lipschitz: Option<f64> = None;
            let mut outcome = optimizer::solve_constrained(&problem, tightening, zero, &settings)?;
            rounds.push(record(&outcome, tightening, None));
            for round in 1..=max_rounds {
                let f = problem.function(&outcome.alpha);
                let estimate = estimate_lipschitz(
                    &f,
                    grid,
                    system,
                    problem.perturbation(),
                    config.beta,
                    config.mc_samples,
                    safety_factor,
                )?;
                log::info!("round {round}: Lipschitz estimate {estimate:.4e}");
                if let Some(previous) = lipschitz {
                    if (estimate - previous).abs() <= 0.1 * previous {
                        break;
                    }
                }
                if round == max_rounds && lipschitz.is_some() {
                    log::warn!("Lipschitz estimate did not settle within {max_rounds} rounds");
                    break;
                }
                lipschitz = Some(estimate);
                tightening = estimate * xi;
                outcome = optimizer::solve_constrained(&problem, tightening, outcome.alpha.clone(), &settings)?;
                rounds.push(record(&outcome, tightening, lipschitz));
            }
            (outcome, tightening, lipschitz)
        }
    };

    let final_decrease = problem.expected_decrease_at_grid(&outcome.alpha)?;
    let value = problem.function(&outcome.alpha);
    let certification = CertReport {
        lipschitz_used: lipschitz,
        seeds: SeedRecord { learner: config.rng_seed, ..SeedRecord::default() },
        ..CertReport::default()
    };
    Ok(LearnedModel {
        value,
        beta: config.beta,
        grid: grid.clone().with_tightening(tightening),
        num_data_centers: problem.num_data_centers(),
        certification,
        training: TrainingMeta {
            config: config.clone(),
            seed: config.rng_seed,
            lambda: problem.lambda(),
            initial_loss,
            final_loss: outcome.loss,
            trace: outcome.trace,
            rounds,
            final_decrease,
        },
    })
}

fn record(outcome: &optimizer::SolveOutcome, tightening: f64, lipschitz: Option<f64>) -> RoundRecord {
    RoundRecord {
        tightening,
        lipschitz,
        outer_iterations: outcome.outer_iterations,
        converged: outcome.converged,
        final_loss: outcome.loss,
        max_violation: outcome.max_violation,
    }
}
