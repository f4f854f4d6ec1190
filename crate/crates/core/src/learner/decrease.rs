use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::policy::{ClfPolicy, ScalarField};
use crate::rng;
use crate::systems::{ControlAffineSystem, PerturbationModel};

/// Fixed standard-normal draws `ω_1..ω_S` for evaluation point `index` of
/// stream `label`. With two or more samples the draws are shifted to zero
/// sample mean, so the sample cloud is centred on the deterministic next
/// state. A single zero draw is returned when `pm` has no noise.
pub fn noise_draws(
    seed: u64,
    label: &str,
    index: u64,
    samples: usize,
    input_dim: usize,
    pm: &PerturbationModel,
) -> Vec<DVector<f64>> {
    if pm.is_zero() || samples == 0 {
        return vec![DVector::zeros(input_dim)];
    }
    let mut rng = rng::stream(seed, label, index);
    let mut draws: Vec<DVector<f64>> = (0..samples)
        .map(|_| DVector::from_iterator(input_dim, (0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal))))
        .collect();
    if samples >= 2 {
        let mean = draws.iter().fold(DVector::zeros(input_dim), |acc, w| acc + w) / samples as f64;
        for w in &mut draws {
            *w -= &mean;
        }
    }
    draws
}

/// Monte Carlo estimate of `E[V(x⁺) | x] - V(x)` under the closed loop of the
/// CLF policy, `x⁺ = f(x) + g(x)π̂(x) + g(x)√Σ(x) ω`, averaged over `draws`.
pub fn expected_decrease<V: ScalarField + ?Sized>(
    v: &V,
    x: &DVector<f64>,
    system: &ControlAffineSystem,
    pm: &PerturbationModel,
    beta: f64,
    draws: &[DVector<f64>],
) -> Result<f64> {
    let policy = ClfPolicy::new(v, beta, system)?;
    let next = policy.next_state(x)?;
    let base = v.value(x);
    if pm.is_zero() {
        return Ok(v.value(&next) - base);
    }
    let spread = system.input_gain(x) * pm.sqrt_covariance(x, system.input_dim())?;
    let mut acc = 0.0;
    for w in draws {
        acc += v.value(&(&next + &spread * w));
    }
    Ok(acc / draws.len() as f64 - base)
}
