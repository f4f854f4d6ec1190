use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ControlAffineSystem;
use crate::error::{Error, Result};

/// State-dependent covariance `Σ(x)` of the action perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceModel {
    Zero,
    /// `Σ(x) = σ² (1 - exp(-‖x - x*‖² / ρ²)) I`, vanishing at the target.
    Vanishing {
        sigma: f64,
        rho: f64,
        target: Vec<f64>,
    },
}

/// How `√Σ` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqrtMode {
    /// Entry-wise square root.
    #[default]
    ElementWise,
    /// Lower Cholesky factor (symmetric eigen square root for singular Σ).
    Cholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    pub covariance: CovarianceModel,
    #[serde(default)]
    pub sqrt_mode: SqrtMode,
    /// Maximum rejection attempts before the unperturbed action is used.
    pub truncation: usize,
    pub rng_seed: u64,
}

pub const DEFAULT_TRUNCATION_ATTEMPTS: usize = 100;

impl PerturbationModel {
    pub fn zero() -> Self {
        Self {
            covariance: CovarianceModel::Zero,
            sqrt_mode: SqrtMode::ElementWise,
            truncation: DEFAULT_TRUNCATION_ATTEMPTS,
            rng_seed: 0,
        }
    }

    /// Vanishing isotropic covariance with scale `sigma`; zero when `sigma == 0`.
    pub fn vanishing(sigma: f64, rho: f64, target: &DVector<f64>, rng_seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) || !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid perturbation scale sigma={sigma}, rho={rho}")));
        }
        let covariance = if sigma == 0.0 {
            CovarianceModel::Zero
        } else {
            CovarianceModel::Vanishing { sigma, rho, target: target.as_slice().to_vec() }
        };
        Ok(Self { covariance, sqrt_mode: SqrtMode::ElementWise, truncation: DEFAULT_TRUNCATION_ATTEMPTS, rng_seed })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.covariance, CovarianceModel::Zero)
    }

    /// `Σ(x)` as an `m × m` matrix.
    pub fn covariance(&self, x: &DVector<f64>, input_dim: usize) -> DMatrix<f64> {
        match &self.covariance {
            CovarianceModel::Zero => DMatrix::zeros(input_dim, input_dim),
            CovarianceModel::Vanishing { sigma, rho, target } => {
                let d2: f64 = x.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                let scale = sigma * sigma * (1.0 - (-d2 / (rho * rho)).exp());
                DMatrix::identity(input_dim, input_dim) * scale
            }
        }
    }

    /// `√Σ(x)` per [`SqrtMode`].
    pub fn sqrt_covariance(&self, x: &DVector<f64>, input_dim: usize) -> Result<DMatrix<f64>> {
        let cov = self.covariance(x, input_dim);
        if cov.iter().all(|v| *v == 0.0) {
            return Ok(cov);
        }
        match self.sqrt_mode {
            SqrtMode::ElementWise => {
                if cov.iter().any(|v| *v < 0.0) {
                    return Err(Error::InvalidInput(
                        "element-wise square root of a covariance with negative entries".into(),
                    ));
                }
                Ok(cov.map(f64::sqrt))
            }
            SqrtMode::Cholesky => match cov.clone().cholesky() {
                Some(ch) => Ok(ch.l()),
                None => {
                    let eig = cov.symmetric_eigen();
                    if eig.eigenvalues.iter().any(|l| *l < -1e-12) {
                        return Err(Error::NotPositiveSemidefinite(eig.eigenvalues.min()));
                    }
                    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
                }
            },
        }
    }
}

/// Outcome of [`sample_perturbed_action`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedAction {
    pub action: DVector<f64>,
    /// Every rejection attempt left the box; `action` is the unperturbed mean.
    pub truncated: bool,
}

/// Draws `mean + √Σ(x) ω`, `ω ~ N(0, I)`, rejecting draws whose next state
/// leaves the box.
pub fn sample_perturbed_action<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    x: &DVector<f64>,
    pm: &PerturbationModel,
    system: &ControlAffineSystem,
    rng: &mut R,
) -> Result<PerturbedAction> {
    let m = system.input_dim();
    let root = pm.sqrt_covariance(x, m)?;
    if root.iter().all(|v| *v == 0.0) {
        return Ok(PerturbedAction { action: mean.clone(), truncated: false });
    }
    let f = system.drift(x);
    let g = system.input_gain(x);
    for _ in 0..pm.truncation {
        let omega = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let action = mean + &root * omega;
        let next = &f + &g * &action;
        if system.bounds().contains(&next) {
            return Ok(PerturbedAction { action, truncated: false });
        }
    }
    Ok(PerturbedAction { action: mean.clone(), truncated: true })
}
