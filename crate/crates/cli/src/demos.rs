//! Synthetic demonstrator for the nonlinear experiment.
//!
//! The demonstrator chooses its input so that the next state is one gradient
//! step on a potential evaluated at the drifted state,
//! `x⁺ = f(x) - ∇Φ(f(x))`, where
//! `Φ(z) = κ/2 ‖z - x*‖² + h Σ_boxes Π_k σ((z_k - l_k)/w) σ((u_k - z_k)/w)`
//! and `σ` is the logistic function. The box terms are smooth bumps that push
//! demonstrations around the given high-cost regions.

use clf_irl::systems::{ControlAffineSystem, Trajectory};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    pub starts: Vec<Vec<f64>>,
    /// Transitions per demonstration.
    pub steps: usize,
    /// Curvature of the quadratic bowl around the target.
    pub kappa: f64,
    /// Height of each box bump.
    pub height: f64,
    /// Edge softness of each box bump.
    pub width: f64,
    pub boxes: Vec<BoxRegion>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PotentialField {
    fn validate(&self, system: &ControlAffineSystem) -> CliResult<()> {
        let n = system.state_dim();
        if system.input_dim() != n {
            return Err(CliError::Config("the potential-field demonstrator needs as many inputs as states".into()));
        }
        if self.starts.is_empty() || self.steps == 0 {
            return Err(CliError::Config("the potential-field demonstrator needs starts and at least one step".into()));
        }
        if self.width.is_nan() || self.width <= 0.0 || !self.kappa.is_finite() || !self.height.is_finite() {
            return Err(CliError::Config("potential-field kappa and height must be finite, width positive".into()));
        }
        let bad_dim = self.starts.iter().any(|s| s.len() != n)
            || self.boxes.iter().any(|b| b.lower.len() != n || b.upper.len() != n);
        if bad_dim {
            return Err(CliError::Config(format!("potential-field starts and boxes must have dimension {n}")));
        }
        Ok(())
    }

    /// `∇Φ(z)`.
    pub fn gradient(&self, z: &DVector<f64>, target: &DVector<f64>) -> DVector<f64> {
        let w = self.width;
        let mut grad = (z - target) * self.kappa;
        for b in &self.boxes {
            let rise: Vec<f64> = (0..z.len()).map(|k| logistic((z[k] - b.lower[k]) / w)).collect();
            let fall: Vec<f64> = (0..z.len()).map(|k| logistic((b.upper[k] - z[k]) / w)).collect();
            let factor: Vec<f64> = rise.iter().zip(&fall).map(|(r, f)| r * f).collect();
            let slope = |q: f64| q * (1.0 - q) / w;
            for k in 0..z.len() {
                let others: f64 = (0..z.len()).filter(|j| *j != k).map(|j| factor[j]).product();
                grad[k] += self.height * (slope(rise[k]) * fall[k] - rise[k] * slope(fall[k])) * others;
            }
        }
        grad
    }

    /// Deterministic demonstrations with their applied inputs.
    pub fn generate(&self, system: &ControlAffineSystem) -> CliResult<Vec<Trajectory>> {
        self.validate(system)?;
        self.starts
            .iter()
            .enumerate()
            .map(|(i, start)| {
                let mut x = DVector::from_column_slice(start);
                if !system.bounds().contains(&x) {
                    return Err(CliError::Config(format!("demonstration start {start:?} lies outside the state box")));
                }
                let mut states = vec![x.clone()];
                let mut actions = Vec::with_capacity(self.steps);
                for _ in 0..self.steps {
                    let push = self.gradient(&system.drift(&x), system.target());
                    let u = -system
                        .input_gain(&x)
                        .lu()
                        .solve(&push)
                        .ok_or_else(|| CliError::Config(format!("input gain is singular at {:?}", x.as_slice())))?;
                    x = system.step(&x, &u).map_err(|e| CliError::Config(e.to_string()))?;
                    if !system.bounds().contains(&x) {
                        return Err(CliError::Config(format!(
                            "demonstration {i} leaves the state box at {:?}",
                            x.as_slice()
                        )));
                    }
                    states.push(x.clone());
                    actions.push(u);
                }
                Trajectory::new(format!("demo-{i}"), states, Some(actions)).map_err(|e| CliError::Config(e.to_string()))
            })
            .collect()
    }
}
