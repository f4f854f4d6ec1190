use nalgebra::DVector;

use super::{sample_perturbed_action, ControlAffineSystem, PerturbationModel};
use crate::error::{Error, Result};
use crate::rng;

/// A state-feedback law `x ↦ u`.
pub trait Policy: Sync {
    fn action(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Policy for F
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    fn action(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self(x))
    }
}

/// A time-indexed state sequence with optional applied actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<DVector<f64>>,
    pub actions: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, states: Vec<DVector<f64>>, actions: Option<Vec<DVector<f64>>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidInput("trajectory without states".into()));
        }
        if let Some(actions) = &actions {
            if actions.len() + 1 != states.len() {
                return Err(Error::InvalidInput(format!(
                    "trajectory has {} states but {} actions",
                    states.len(),
                    actions.len()
                )));
            }
        }
        Ok(Self { id: id.into(), states, actions })
    }

    /// Checks dimensions and containment of every state.
    pub fn validate(&self, system: &ControlAffineSystem) -> Result<()> {
        for x in &self.states {
            if x.len() != system.state_dim() {
                return Err(Error::DimensionMismatch { expected: system.state_dim(), got: x.len() });
            }
            if !system.bounds().contains(x) {
                return Err(Error::OutOfBounds { state: x.as_slice().to_vec() });
            }
        }
        if let Some(actions) = &self.actions {
            if let Some(u) = actions.iter().find(|u| u.len() != system.input_dim()) {
                return Err(Error::DimensionMismatch { expected: system.input_dim(), got: u.len() });
            }
        }
        Ok(())
    }

    /// Number of transitions.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// Consecutive `(x_{t-1}, x_t)` pairs.
    pub fn transitions(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.states.windows(2).map(|w| (&w[0], &w[1]))
    }
}

/// A simulated closed-loop trajectory with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// The next state left the box; the escaping state is not recorded.
    pub escaped: bool,
    /// Number of steps whose perturbation exhausted the rejection budget.
    pub truncation_events: usize,
    /// First time index at which the stop predicate held.
    pub stopped_at: Option<usize>,
}

/// Rolls out `x⁺ = f(x) + g(x) ũ(x)` for `horizon` steps, where `ũ` is the
/// policy action perturbed per `pm`. The noise stream is
/// `(pm.rng_seed, "rollout", stream_index)`.
pub fn simulate<P: Policy + ?Sized>(
    system: &ControlAffineSystem,
    policy: &P,
    pm: &PerturbationModel,
    x0: &DVector<f64>,
    horizon: usize,
    stream_index: u64,
) -> Result<Rollout> {
    simulate_until(system, policy, pm, x0, horizon, stream_index, |_| false)
}

/// Like [`simulate`], but stops as soon as `stop` holds for the current state
/// (the initial state included).
pub fn simulate_until<P, S>(
    system: &ControlAffineSystem,
    policy: &P,
    pm: &PerturbationModel,
    x0: &DVector<f64>,
    horizon: usize,
    stream_index: u64,
    stop: S,
) -> Result<Rollout>
where
    P: Policy + ?Sized,
    S: Fn(&DVector<f64>) -> bool,
{
    if !system.bounds().contains(x0) {
        return Err(Error::OutOfBounds { state: x0.as_slice().to_vec() });
    }
    let mut rng = rng::stream(pm.rng_seed, "rollout", stream_index);
    let mut states = vec![x0.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut escaped = false;
    let mut truncation_events = 0;
    let mut stopped_at = stop(x0).then_some(0);
    let mut x = x0.clone();
    for t in 0..horizon {
        if stopped_at.is_some() {
            break;
        }
        let mean = policy.action(&x)?;
        let sampled = sample_perturbed_action(&mean, &x, pm, system, &mut rng)?;
        if sampled.truncated {
            truncation_events += 1;
        }
        let next = system.step(&x, &sampled.action)?;
        if !system.bounds().contains(&next) {
            escaped = true;
            break;
        }
        actions.push(sampled.action);
        states.push(next.clone());
        if stop(&next) {
            stopped_at = Some(t + 1);
        }
        x = next;
    }
    let trajectory = Trajectory::new(format!("rollout-{stream_index}"), states, Some(actions))?;
    Ok(Rollout { trajectory, escaped, truncation_events, stopped_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_lqr_system, builtin_nonlinear_system};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn zero_policy(_: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }

    #[test]
    fn zero_policy_at_origin_is_constant() {
        let sys = builtin_lqr_system();
        let r = simulate(&sys, &zero_policy, &PerturbationModel::zero(), &v(&[0.0, 0.0]), 10, 0).unwrap();
        assert_eq!(r.trajectory.states.len(), 11);
        assert!(r.trajectory.states.iter().all(|x| x.iter().all(|c| *c == 0.0)));
        assert!(!r.escaped);
    }

    #[test]
    fn horizon_one_has_two_states() {
        let sys = builtin_lqr_system();
        let r = simulate(&sys, &zero_policy, &PerturbationModel::zero(), &v(&[1.0, 1.0]), 1, 0).unwrap();
        assert_eq!(r.trajectory.states.len(), 2);
        assert_eq!(r.trajectory.actions.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn escape_is_flagged() {
        let sys = builtin_lqr_system();
        // x1 grows by 0.1 x2 per step under the zero policy
        let r = simulate(&sys, &zero_policy, &PerturbationModel::zero(), &v(&[4.9, 4.0]), 50, 0).unwrap();
        assert!(r.escaped);
        assert!(r.trajectory.states.iter().all(|x| sys.bounds().contains(x)));
    }

    #[test]
    fn zero_noise_ignores_seed() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let policy = |x: &DVector<f64>| (v(&[5.0, 0.0]) - x) * 0.1;
        let mut pm = PerturbationModel::zero();
        let a = simulate(&sys, &policy, &pm, &v(&[1.0, 4.0]), 30, 0).unwrap();
        pm.rng_seed = 99;
        let b = simulate(&sys, &policy, &pm, &v(&[1.0, 4.0]), 30, 5).unwrap();
        assert_eq!(a.trajectory.states, b.trajectory.states);
    }

    #[test]
    fn noisy_rollouts_are_seeded() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let policy = |x: &DVector<f64>| (v(&[5.0, 0.0]) - x) * 0.1;
        let pm = PerturbationModel::vanishing(0.05, 1.0, sys.target(), 4).unwrap();
        let a = simulate(&sys, &policy, &pm, &v(&[1.0, 4.0]), 30, 2).unwrap();
        let b = simulate(&sys, &policy, &pm, &v(&[1.0, 4.0]), 30, 2).unwrap();
        let c = simulate(&sys, &policy, &pm, &v(&[1.0, 4.0]), 30, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.trajectory.states, c.trajectory.states);
        for (x, u) in a.trajectory.states.iter().zip(a.trajectory.actions.as_ref().unwrap()) {
            assert!(sys.bounds().contains(&sys.step(x, u).unwrap()));
        }
    }

    #[test]
    fn trajectory_validation() {
        let sys = builtin_lqr_system();
        assert!(Trajectory::new("a", vec![v(&[0.0, 0.0])], Some(vec![v(&[0.0, 0.0])])).is_err());
        let t = Trajectory::new("a", vec![v(&[0.0, 0.0]), v(&[9.0, 0.0])], None).unwrap();
        assert!(matches!(t.validate(&sys), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn stop_predicate_at_start() {
        let sys = builtin_lqr_system();
        let r =
            simulate_until(&sys, &zero_policy, &PerturbationModel::zero(), &v(&[0.1, 0.0]), 10, 0, |x| x.norm() < 1.0)
                .unwrap();
        assert_eq!(r.stopped_at, Some(0));
        assert_eq!(r.trajectory.states.len(), 1);
    }
}
