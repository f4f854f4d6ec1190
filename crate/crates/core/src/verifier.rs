//! Post-hoc certification of a learned model: decrease audits on the
//! training grid and on a refined lattice, and Monte Carlo convergence.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{expected_decrease, noise_draws, LearnedModel, StabilityGrid};
use crate::rng;
use crate::systems::{simulate_until, ControlAffineSystem, PerturbationModel};

pub const GRID_AUDIT_STREAM: &str = "audit-grid";
pub const DENSE_AUDIT_STREAM: &str = "audit-dense";
/// Audits draw this many times the training sample count.
pub const AUDIT_SAMPLE_FACTOR: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub learner: u64,
    pub grid_audit: Option<u64>,
    pub dense_audit: Option<u64>,
    pub convergence: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub grid: Option<GridAudit>,
    pub dense: Option<DenseAudit>,
    pub convergence: Option<ConvergenceAudit>,
    pub lipschitz_used: Option<f64>,
    pub seeds: SeedRecord,
}

impl CertReport {
    /// True when every audit that was run passed.
    pub fn passed(&self) -> bool {
        self.grid.as_ref().is_none_or(|g| g.pass)
            && self.dense.as_ref().is_none_or(|d| d.pass)
            && self.convergence.as_ref().is_none_or(|c| c.fraction == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAudit {
    pub pass: bool,
    /// `min_i (-E[ΔV(x̂_i)] - tightening)` over non-equilibrium points.
    pub worst_margin: f64,
    pub worst_index: Option<usize>,
    pub worst_point: Option<Vec<f64>>,
    /// `E[ΔV]` at the equilibrium grid point (reported, not tightened).
    pub equilibrium_decrease: f64,
    pub tightening: f64,
    pub samples: usize,
    pub seed: u64,
    pub stream: String,
    /// `E[ΔV]` at every grid point.
    pub decrease: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseAudit {
    pub pass: bool,
    pub refinement: usize,
    pub points_checked: usize,
    pub excluded: usize,
    pub violations: usize,
    /// Largest `E[ΔV]` outside the ball and where it occurs.
    pub worst_decrease: f64,
    pub worst_point: Option<Vec<f64>>,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceAudit {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub radius: f64,
    pub fraction: f64,
    pub median_hitting_time: Option<f64>,
    pub escaped: usize,
    pub truncation_events: usize,
    pub seed: u64,
    /// First step inside the ball per rollout.
    pub hitting_times: Vec<Option<usize>>,
    #[serde(with = "crate::serde_rows")]
    pub starts: Vec<DVector<f64>>,
}

/// Noise seed and sample count for a grid audit.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAuditSettings {
    pub seed: u64,
    pub stream: String,
    pub samples: usize,
}

impl GridAuditSettings {
    /// Fresh stream with ten times the training samples.
    pub fn fresh(model: &LearnedModel) -> Self {
        Self {
            seed: model.training.seed,
            stream: GRID_AUDIT_STREAM.into(),
            samples: AUDIT_SAMPLE_FACTOR * model.training.config.mc_samples,
        }
    }

    /// The draws used by the learner's constraints.
    pub fn training(model: &LearnedModel) -> Self {
        Self {
            seed: model.training.seed,
            stream: crate::learner::CONSTRAINT_STREAM.into(),
            samples: model.training.config.mc_samples,
        }
    }
}

/// Decrease audit on `grid` with fresh noise draws.
pub fn audit_grid(
    model: &LearnedModel,
    grid: &StabilityGrid,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
) -> Result<GridAudit> {
    audit_grid_with(model, grid, system, pm, &GridAuditSettings::fresh(model))
}

pub fn audit_grid_with(
    model: &LearnedModel,
    grid: &StabilityGrid,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
    settings: &GridAuditSettings,
) -> Result<GridAudit> {
    check_dim(model, system)?;
    let decrease = grid
        .points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let draws =
                noise_draws(settings.seed, &settings.stream, i as u64, settings.samples, system.input_dim(), pm);
            expected_decrease(&model.value, x, system, pm, model.beta, &draws)
        })
        .collect::<Result<Vec<f64>>>()?;
    let eq = grid.equilibrium_index;
    let mut worst: Option<(usize, f64)> = None;
    for (i, d) in decrease.iter().enumerate() {
        if i == eq {
            continue;
        }
        let margin = -d - grid.tightening;
        // NaN margins count as worst
        if worst.is_none_or(|(_, w)| margin < w || margin.is_nan()) {
            worst = Some((i, margin));
        }
    }
    let worst_margin = worst.map_or(f64::INFINITY, |(_, m)| m);
    Ok(GridAudit {
        pass: worst_margin > 0.0,
        worst_margin,
        worst_index: worst.map(|(i, _)| i),
        worst_point: worst.map(|(i, _)| grid.points[i].as_slice().to_vec()),
        equilibrium_decrease: decrease[eq],
        tightening: grid.tightening,
        samples: settings.samples,
        seed: settings.seed,
        stream: settings.stream.clone(),
        decrease,
    })
}

/// Decrease audit on the model's lattice refined `refinement` times, excluding
/// the ball of radius `ξ` around the target. A point violates when
/// `E[ΔV] ≥ 0`.
pub fn audit_dense(
    model: &LearnedModel,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
    refinement: usize,
) -> Result<DenseAudit> {
    check_dim(model, system)?;
    if refinement < 2 {
        return Err(Error::InvalidInput(format!("dense audit refinement must be at least 2, got {refinement}")));
    }
    let lattice =
        model.grid.lattice.as_ref().ok_or_else(|| Error::InvalidInput("dense audit needs a lattice grid".into()))?;
    let radius = model.grid.grid_constant;
    let target = system.target();
    let points: Vec<DVector<f64>> =
        lattice.refined(refinement).points().into_iter().filter(|x| (x - target).norm() > radius).collect();
    let total = lattice.refined(refinement).resolution.iter().product::<usize>();
    let seed = model.training.seed;
    let samples = AUDIT_SAMPLE_FACTOR * model.training.config.mc_samples;
    let decrease = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let draws = noise_draws(seed, DENSE_AUDIT_STREAM, i as u64, samples, system.input_dim(), pm);
            expected_decrease(&model.value, x, system, pm, model.beta, &draws)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut violations = 0;
    let mut worst: Option<(usize, f64)> = None;
    for (i, d) in decrease.iter().enumerate() {
        if !(*d < 0.0) {
            violations += 1;
        }
        if worst.is_none_or(|(_, w)| *d > w || d.is_nan()) {
            worst = Some((i, *d));
        }
    }
    Ok(DenseAudit {
        pass: violations == 0,
        refinement,
        points_checked: points.len(),
        excluded: total - points.len(),
        violations,
        worst_decrease: worst.map_or(f64::NEG_INFINITY, |(_, d)| d),
        worst_point: worst.map(|(i, _)| points[i].as_slice().to_vec()),
        radius,
        samples,
        seed,
    })
}

/// Closed-loop rollouts from uniform random starts; a rollout succeeds when
/// it enters the ball of radius `ξ` around the target within `horizon` steps.
/// Leaving the box counts as failure.
pub fn audit_convergence(
    model: &LearnedModel,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<ConvergenceAudit> {
    check_dim(model, system)?;
    if n_rollouts == 0 {
        return Err(Error::InvalidInput("at least one rollout is required".into()));
    }
    let radius = model.grid.grid_constant;
    let target = system.target().clone();
    let policy = model.policy(system)?;
    let mut noise = pm.clone();
    noise.rng_seed = rng::derive_seed(seed, "convergence-noise", 0);
    let starts: Vec<DVector<f64>> = (0..n_rollouts)
        .map(|i| system.bounds().sample(&mut rng::stream(seed, "convergence-start", i as u64)))
        .collect();
    let rollouts = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            simulate_until(system, &policy, &noise, x0, horizon, i as u64, |x| (x - &target).norm() <= radius)
        })
        .collect::<Result<Vec<_>>>()?;
    let hitting_times: Vec<Option<usize>> = rollouts.iter().map(|r| r.stopped_at).collect();
    let mut hits: Vec<usize> = hitting_times.iter().flatten().copied().collect();
    hits.sort_unstable();
    let median_hitting_time = match hits.len() {
        0 => None,
        n if n % 2 == 1 => Some(hits[n / 2] as f64),
        n => Some(0.5 * (hits[n / 2 - 1] + hits[n / 2]) as f64),
    };
    Ok(ConvergenceAudit {
        n_rollouts,
        horizon,
        radius,
        fraction: hits.len() as f64 / n_rollouts as f64,
        median_hitting_time,
        escaped: rollouts.iter().filter(|r| r.escaped).count(),
        truncation_events: rollouts.iter().map(|r| r.truncation_events).sum(),
        seed,
        hitting_times,
        starts,
    })
}

fn check_dim(model: &LearnedModel, system: &ControlAffineSystem) -> Result<()> {
    if model.value.dim() != system.state_dim() {
        return Err(Error::DimensionMismatch { expected: system.state_dim(), got: model.value.dim() });
    }
    Ok(())
}
