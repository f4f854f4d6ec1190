#![allow(dead_code)]

use clf_irl::kernel::Kernel;
use clf_irl::learner::{build_grid, LearnerConfig, LipschitzMode, StabilityGrid};
use clf_irl::lqr::{generate_demonstrations, solve_dare, LqrProblem};
use clf_irl::policy::{ClfPolicy, ScalarField};
use clf_irl::systems::{builtin_lqr_system, builtin_nonlinear_system, ControlAffineSystem, Trajectory};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Setup {
    pub system: ControlAffineSystem,
    pub data: Vec<Trajectory>,
    pub grid: StabilityGrid,
    pub kernel: Kernel,
    pub config: LearnerConfig,
}

/// `c ‖x - x*‖²`.
pub struct Bowl {
    pub c: f64,
    pub target: DVector<f64>,
}

impl ScalarField for Bowl {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.c * (x - &self.target).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.target) * (2.0 * self.c)
    }
}

/// The LQR benchmark with `n_points` optimal one-step demonstrations.
pub fn lqr(n_points: usize, resolution: usize, seed: u64) -> Setup {
    let system = builtin_lqr_system();
    let dare = solve_dare(&LqrProblem::benchmark()).unwrap();
    let data = generate_demonstrations(&system, &dare.k, n_points, seed).unwrap();
    let grid = build_grid(system.bounds(), &[resolution, resolution], system.target()).unwrap();
    let config = LearnerConfig { lipschitz_mode: LipschitzMode::Fixed { margin: 0.01 }, ..LearnerConfig::default() };
    Setup { system, data, grid, kernel: Kernel::squared_exponential(2.0, 1.0).unwrap(), config }
}

/// The nonlinear benchmark with short demonstrations of a quadratic CLF
/// policy and a noisy perturbation model.
pub fn nonlinear(resolution: usize) -> Setup {
    let system = builtin_nonlinear_system(None).unwrap();
    let bowl = Bowl { c: 0.3, target: system.target().clone() };
    let policy = ClfPolicy::new(&bowl, 0.2, &system).unwrap();
    let data = [[0.0, 1.0], [0.5, 4.5]]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut x = DVector::from_row_slice(s);
            let mut states = vec![x.clone()];
            for _ in 0..3 {
                x = policy.next_state(&x).unwrap();
                states.push(x.clone());
            }
            Trajectory::new(format!("d{i}"), states, None).unwrap()
        })
        .collect();
    let grid = build_grid(system.bounds(), &[resolution, resolution], system.target()).unwrap();
    let config = LearnerConfig {
        lipschitz_mode: LipschitzMode::Fixed { margin: 0.01 },
        mc_sigma: 0.05,
        rng_seed: 11,
        ..LearnerConfig::default()
    };
    Setup { system, data, grid, kernel: Kernel::squared_exponential(1.5, 1.0).unwrap(), config }
}

pub fn random_vector(seed: u64, len: usize, scale: f64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_iterator(len, (0..len).map(|_| rng.random_range(-scale..scale)))
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
