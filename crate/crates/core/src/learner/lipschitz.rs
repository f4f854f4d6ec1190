use nalgebra::DVector;
use rayon::prelude::*;

use super::decrease::{expected_decrease, noise_draws};
use super::grid::StabilityGrid;
use crate::error::{Error, Result};
use crate::policy::ScalarField;
use crate::systems::{ControlAffineSystem, PerturbationModel};

pub const LIPSCHITZ_STREAM: &str = "lipschitz";

/// Relative finite-difference step, scaled by the largest box side.
const FD_STEP: f64 = 1e-5;

/// Upper estimate of the Lipschitz constant of `x ↦ E[ΔV(x)]`: the largest
/// finite-difference gradient norm over the grid points and cell midpoints,
/// times `safety_factor`. Each sample point uses its own fixed noise draws
/// for all of its difference quotients.
pub fn estimate_lipschitz<V: ScalarField + ?Sized>(
    v: &V,
    grid: &StabilityGrid,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
    beta: f64,
    mc_samples: usize,
    safety_factor: f64,
) -> Result<f64> {
    if !(safety_factor > 0.0) {
        return Err(Error::InvalidInput(format!("safety factor must be positive, got {safety_factor}")));
    }
    let bounds = system.bounds();
    let h = FD_STEP * bounds.largest_side();
    let samples = grid.refined_samples();
    let norms = samples
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let draws = noise_draws(pm.rng_seed, LIPSCHITZ_STREAM, j as u64, mc_samples, system.input_dim(), pm);
            let mut grad = DVector::zeros(x.len());
            for d in 0..x.len() {
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[d] = (x[d] + h).min(bounds.upper()[d]);
                lo[d] = (x[d] - h).max(bounds.lower()[d]);
                let up = expected_decrease(v, &hi, system, pm, beta, &draws)?;
                let down = expected_decrease(v, &lo, system, pm, beta, &draws)?;
                grad[d] = (up - down) / (hi[d] - lo[d]);
            }
            Ok(grad.norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(safety_factor * norms.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, RkhsFunction};
    use crate::learner::grid::build_grid;
    use crate::systems::{builtin_nonlinear_system, BoxBounds};
    use nalgebra::DMatrix;

    #[derive(Debug)]
    struct Linear(f64);

    impl ScalarField for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &DVector<f64>) -> f64 {
            self.0 * x[0]
        }
        fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, self.0)
        }
    }

    #[derive(Debug)]
    struct Halving;

    impl crate::systems::Dynamics for Halving {
        fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
            x * 0.5
        }
        fn input_gain(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
    }

    fn halving_system() -> ControlAffineSystem {
        ControlAffineSystem::new(
            "halving",
            1,
            std::sync::Arc::new(Halving),
            BoxBounds::cube(1, -2.0, 2.0).unwrap(),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn zero_function_gives_zero() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let grid = build_grid(sys.bounds(), &[4, 4], sys.target()).unwrap();
        let pm = PerturbationModel::vanishing(0.05, 1.0, sys.target(), 3).unwrap();
        let f = RkhsFunction::new(Kernel::squared_exponential(1.0, 1.0).unwrap(), &grid.points, DVector::zeros(16))
            .unwrap();
        assert_eq!(estimate_lipschitz(&f, &grid, &sys, &pm, 0.2, 5, 1.2).unwrap(), 0.0);
    }

    #[test]
    fn linear_field_under_halving_map() {
        // E[ΔV](x) = c·x/2 - c·x = -c·x/2, Lipschitz constant |c|/2.
        let sys = halving_system();
        let grid = build_grid(sys.bounds(), &[5], sys.target()).unwrap();
        let pm = PerturbationModel::zero();
        let est = estimate_lipschitz(&Linear(3.0), &grid, &sys, &pm, 0.2, 1, 1.0).unwrap();
        assert!((1.5 - 1e-9..1.5 + 1e-6).contains(&est), "{est}");
    }

    #[test]
    fn safety_factor_scales_linearly() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let grid = build_grid(sys.bounds(), &[4, 4], sys.target()).unwrap();
        let pm = PerturbationModel::vanishing(0.05, 1.0, sys.target(), 3).unwrap();
        let weights = DVector::from_fn(16, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let f = RkhsFunction::new(Kernel::squared_exponential(1.2, 1.0).unwrap(), &grid.points, weights).unwrap();
        let one = estimate_lipschitz(&f, &grid, &sys, &pm, 0.2, 5, 1.0).unwrap();
        let two = estimate_lipschitz(&f, &grid, &sys, &pm, 0.2, 5, 2.0).unwrap();
        assert!(one > 0.0);
        assert_eq!(two, 2.0 * one);
    }
}
