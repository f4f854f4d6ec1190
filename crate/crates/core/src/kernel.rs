//! Stationary kernels and functions in their RKHS, `V(x) = Σ_j α_j k(z_j, x)`,
//! with analytic spatial gradients and Hessian-vector products.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::BoxBounds;

/// Tolerance below zero accepted for `αᵀKα` before it is reported as an error.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `k(x, z) = s² exp(-½ Σ_d (x_d - z_d)² / ℓ_d²)`
    SquaredExponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    /// One entry (isotropic) or one per state dimension.
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl Kernel {
    pub fn squared_exponential(lengthscale: f64, signal_variance: f64) -> Result<Self> {
        Self::squared_exponential_ard(vec![lengthscale], signal_variance)
    }

    pub fn squared_exponential_ard(lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        let kernel = Self { family: KernelFamily::SquaredExponential, lengthscales, signal_variance };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Isotropic squared-exponential kernel with lengthscale 20% of the
    /// largest side of `bounds` and unit signal variance.
    pub fn default_for(bounds: &BoxBounds) -> Self {
        Self::squared_exponential(0.2 * bounds.largest_side(), 1.0).expect("positive box side")
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid lengthscales {:?}", self.lengthscales)));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid signal variance {}", self.signal_variance)));
        }
        Ok(())
    }

    /// `1/ℓ_d²` for each of `dim` axes.
    fn inverse_squared_lengthscales(&self, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|d| {
                let l = if self.lengthscales.len() == 1 { self.lengthscales[0] } else { self.lengthscales[d] };
                1.0 / (l * l)
            })
            .collect()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.lengthscales.len() != 1 && self.lengthscales.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.lengthscales.len() });
        }
        Ok(())
    }

    #[inline]
    fn eval_slices(&self, a: &[f64], b: &[f64], inv: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for ((x, z), w) in a.iter().zip(b).zip(inv) {
            let d = x - z;
            d2 += d * d * w;
        }
        self.signal_variance * (-0.5 * d2).exp()
    }

    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let inv = self.inverse_squared_lengthscales(a.len());
        self.eval_slices(a.as_slice(), b.as_slice(), &inv)
    }

    /// Gram matrix of the columns of `points`.
    pub fn gram(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let n = points.nrows();
        let count = points.ncols();
        let inv = self.inverse_squared_lengthscales(n);
        let data = points.as_slice();
        let mut gram = DMatrix::zeros(count, count);
        for i in 0..count {
            let zi = &data[i * n..(i + 1) * n];
            gram[(i, i)] = self.signal_variance;
            for j in 0..i {
                let k = self.eval_slices(zi, &data[j * n..(j + 1) * n], &inv);
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }
        gram
    }
}

/// `V(x) = Σ_j α_j k(z_j, x)`. Centers are shared between copies that differ
/// only in their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RkhsFunctionRepr", into = "RkhsFunctionRepr")]
pub struct RkhsFunction {
    kernel: Kernel,
    /// `n × M`, one center per column.
    centers: Arc<DMatrix<f64>>,
    weights: DVector<f64>,
    inv_sq: Vec<f64>,
}

impl RkhsFunction {
    pub fn new(kernel: Kernel, centers: &[DVector<f64>], weights: DVector<f64>) -> Result<Self> {
        let dim = centers.first().map(|c| c.len()).ok_or_else(|| Error::InvalidInput("no centers".into()))?;
        if let Some(c) = centers.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
        }
        let matrix = DMatrix::from_columns(centers);
        Self::from_matrix(kernel, Arc::new(matrix), weights)
    }

    /// Centers given as the columns of an `n × M` matrix.
    pub fn from_matrix(kernel: Kernel, centers: Arc<DMatrix<f64>>, weights: DVector<f64>) -> Result<Self> {
        kernel.validate()?;
        kernel.check_dim(centers.nrows())?;
        if centers.ncols() != weights.len() {
            return Err(Error::DimensionMismatch { expected: centers.ncols(), got: weights.len() });
        }
        if !centers.iter().chain(weights.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite centers or weights".into()));
        }
        let inv_sq = kernel.inverse_squared_lengthscales(centers.nrows());
        Ok(Self { kernel, centers, weights, inv_sq })
    }

    /// Same kernel and centers, new weights.
    pub fn with_weights(&self, weights: DVector<f64>) -> Self {
        assert_eq!(weights.len(), self.weights.len(), "weight count must match center count");
        Self { kernel: self.kernel.clone(), centers: Arc::clone(&self.centers), weights, inv_sq: self.inv_sq.clone() }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn shared_centers(&self) -> &Arc<DMatrix<f64>> {
        &self.centers
    }

    pub fn center(&self, j: usize) -> DVector<f64> {
        self.centers.column(j).into_owned()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.ncols()
    }

    fn center_slices(&self) -> std::slice::ChunksExact<'_, f64> {
        self.centers.as_slice().chunks_exact(self.dim())
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let x = x.as_slice();
        self.center_slices()
            .zip(self.weights.iter())
            .map(|(z, a)| a * self.kernel.eval_slices(x, z, &self.inv_sq))
            .sum()
    }

    /// `∇V(x) = -Σ_j α_j k(z_j, x) Λ⁻¹ (x - z_j)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.value_and_gradient(x).1
    }

    pub fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = self.dim();
        let xs = x.as_slice();
        let mut value = 0.0;
        let mut grad = DVector::zeros(n);
        for (z, a) in self.center_slices().zip(self.weights.iter()) {
            let ak = a * self.kernel.eval_slices(xs, z, &self.inv_sq);
            value += ak;
            for d in 0..n {
                grad[d] -= ak * (xs[d] - z[d]) * self.inv_sq[d];
            }
        }
        (value, grad)
    }

    /// `(∇²V(x)) v`, using
    /// `∂²k/∂x∂xᵀ = k (w wᵀ - Λ⁻¹)` with `w = Λ⁻¹ (x - z)`.
    pub fn hessian_vector(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let xs = x.as_slice();
        let mut out = DVector::zeros(n);
        let mut w = vec![0.0; n];
        for (z, a) in self.center_slices().zip(self.weights.iter()) {
            let ak = a * self.kernel.eval_slices(xs, z, &self.inv_sq);
            let mut wv = 0.0;
            for d in 0..n {
                w[d] = (xs[d] - z[d]) * self.inv_sq[d];
                wv += w[d] * v[d];
            }
            for d in 0..n {
                out[d] += ak * (w[d] * wv - self.inv_sq[d] * v[d]);
            }
        }
        out
    }

    /// `[k(z_1, x), ..., k(z_M, x)]`, so that `V(x) = αᵀ k(x)`.
    pub fn kernel_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let xs = x.as_slice();
        DVector::from_iterator(
            self.num_centers(),
            self.center_slices().map(|z| self.kernel.eval_slices(xs, z, &self.inv_sq)),
        )
    }

    /// Kernel vector, value and gradient at `x` in a single pass.
    pub fn kernel_vector_value_gradient(&self, x: &DVector<f64>) -> (DVector<f64>, f64, DVector<f64>) {
        let n = self.dim();
        let xs = x.as_slice();
        let mut kvec = DVector::zeros(self.num_centers());
        let mut value = 0.0;
        let mut grad = DVector::zeros(n);
        for (j, (z, a)) in self.center_slices().zip(self.weights.iter()).enumerate() {
            let k = self.kernel.eval_slices(xs, z, &self.inv_sq);
            kvec[j] = k;
            let ak = a * k;
            value += ak;
            for d in 0..n {
                grad[d] -= ak * (xs[d] - z[d]) * self.inv_sq[d];
            }
        }
        (kvec, value, grad)
    }

    /// `n × M` matrix whose column `j` is `∇_x k(z_j, x)`, so that
    /// `∇V(x) = G(x) α`.
    pub fn kernel_gradients(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let xs = x.as_slice();
        let mut out = DMatrix::zeros(n, self.num_centers());
        for (j, z) in self.center_slices().enumerate() {
            let k = self.kernel.eval_slices(xs, z, &self.inv_sq);
            for d in 0..n {
                out[(d, j)] = -k * (xs[d] - z[d]) * self.inv_sq[d];
            }
        }
        out
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.kernel.gram(&self.centers)
    }

    /// `‖V‖²_k = αᵀ K α`.
    pub fn rkhs_norm_sq(&self) -> Result<f64> {
        self.rkhs_norm_sq_with_gram(&self.gram())
    }

    /// `αᵀ K α` with a precomputed Gram matrix of the centers.
    pub fn rkhs_norm_sq_with_gram(&self, gram: &DMatrix<f64>) -> Result<f64> {
        let value = self.weights.dot(&(gram * &self.weights));
        if value < -PSD_TOLERANCE {
            return Err(Error::NotPositiveSemidefinite(value));
        }
        Ok(value.max(0.0))
    }
}

#[derive(Serialize, Deserialize)]
struct RkhsFunctionRepr {
    kernel: Kernel,
    /// Row-major: one inner list per center.
    centers: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl From<RkhsFunction> for RkhsFunctionRepr {
    fn from(f: RkhsFunction) -> Self {
        let centers = f.center_slices().map(<[f64]>::to_vec).collect();
        Self { kernel: f.kernel, centers, weights: f.weights.as_slice().to_vec() }
    }
}

impl TryFrom<RkhsFunctionRepr> for RkhsFunction {
    type Error = Error;

    fn try_from(r: RkhsFunctionRepr) -> Result<Self> {
        let centers: Vec<DVector<f64>> = r.centers.into_iter().map(DVector::from_vec).collect();
        RkhsFunction::new(r.kernel, &centers, DVector::from_vec(r.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn random_function(seed: u64, count: usize) -> RkhsFunction {
        let mut rng = stream(seed, "kernel-test", 0);
        let centers: Vec<DVector<f64>> =
            (0..count).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0))).collect();
        let weights = DVector::from_fn(count, |_, _| rng.random_range(-2.0..2.0));
        let kernel = Kernel::squared_exponential_ard(vec![1.3, 0.8], 1.7).unwrap();
        RkhsFunction::new(kernel, &centers, weights).unwrap()
    }

    fn se(lengthscale: f64) -> Kernel {
        Kernel::squared_exponential(lengthscale, 1.0).unwrap()
    }

    #[test]
    fn zero_weights_vanish() {
        let f = random_function(1, 5).with_weights(DVector::zeros(5));
        let x = v(&[0.3, -1.0]);
        assert_eq!(f.value(&x), 0.0);
        assert_eq!(f.gradient(&x), DVector::zeros(2));
        assert_eq!(f.hessian_vector(&x, &v(&[1.0, 2.0])), DVector::zeros(2));
        assert_eq!(f.rkhs_norm_sq().unwrap(), 0.0);
    }

    #[test]
    fn single_center_values() {
        let z = v(&[1.0, 2.0]);
        let f = RkhsFunction::new(se(1.0), std::slice::from_ref(&z), v(&[1.0])).unwrap();
        assert_eq!(f.value(&z), 1.0);
        assert_eq!(f.gradient(&z), DVector::zeros(2));
        // ‖d‖ = √2, ℓ = 1: exp(-1), reference from 30-digit evaluation
        assert_relative_eq!(f.value(&v(&[2.0, 3.0])), 0.367_879_441_171_442_32, max_relative = 1e-15);
        let scaled = f.with_weights(v(&[-3.0]));
        assert_relative_eq!(scaled.rkhs_norm_sq().unwrap(), 9.0);
    }

    #[test]
    fn two_center_norm() {
        // K = [[1, e^-1/2], [e^-1/2, 1]] for unit distance and unit lengthscale
        let f = RkhsFunction::new(se(1.0), &[v(&[0.0, 0.0]), v(&[1.0, 0.0])], v(&[2.0, -1.0])).unwrap();
        let off = (-0.5f64).exp();
        let expected = 4.0 + 1.0 - 2.0 * 2.0 * off;
        assert_relative_eq!(f.rkhs_norm_sq().unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let f = random_function(seed, 8);
            let mut rng = stream(seed, "kernel-test-x", 0);
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let g = f.gradient(&x);
            for d in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                assert!((fd - g[d]).abs() <= 1e-6 * g.amax().max(1e-3), "seed {seed}: {fd} vs {}", g[d]);
            }
        }
    }

    #[test]
    fn hessian_vector_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let f = random_function(seed + 100, 8);
            let mut rng = stream(seed, "kernel-test-hv", 0);
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let dir = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let hv = f.hessian_vector(&x, &dir);
            let fd = (f.gradient(&(&x + &dir * h)) - f.gradient(&(&x - &dir * h))) / (2.0 * h);
            assert!((&fd - &hv).amax() <= 1e-5 * hv.amax().max(1e-3), "seed {seed}: {fd} vs {hv}");
        }
    }

    #[test]
    fn hessian_vector_of_zero_direction() {
        let f = random_function(3, 4);
        assert_eq!(f.hessian_vector(&v(&[0.1, 0.2]), &DVector::zeros(2)), DVector::zeros(2));
    }

    #[test]
    fn kernel_vector_and_gradients_are_consistent() {
        let f = random_function(5, 6);
        let x = v(&[0.5, -0.7]);
        assert_relative_eq!(f.kernel_vector(&x).dot(f.weights()), f.value(&x), max_relative = 1e-14);
        let g = f.kernel_gradients(&x) * f.weights();
        assert!((g - f.gradient(&x)).amax() < 1e-14);
    }

    #[test]
    fn gram_is_psd_on_random_sets() {
        let kernel = se(0.9);
        for seed in 0..20 {
            let mut rng = stream(seed, "gram", 0);
            let pts = DMatrix::from_fn(2, 10, |_, _| rng.random_range(-2.0..2.0));
            let gram = kernel.gram(&pts);
            assert!((&gram - gram.transpose()).amax() == 0.0);
            assert!(gram.symmetric_eigen().eigenvalues.min() >= -1e-9);
        }
    }

    #[test]
    fn negative_norm_is_rejected() {
        let f = random_function(1, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(f.rkhs_norm_sq_with_gram(&bad), Err(Error::NotPositiveSemidefinite(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let f = random_function(9, 7);
        let text = serde_json::to_string(&f).unwrap();
        let back: RkhsFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn default_lengthscale_is_fifth_of_box() {
        let b = BoxBounds::cube(2, -5.0, 5.0).unwrap();
        assert_eq!(Kernel::default_for(&b).lengthscales, vec![2.0]);
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let k = Kernel::squared_exponential_ard(vec![0.7, 1.1, 2.0], 1.5).unwrap();
            let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
            prop_assert_eq!(k.eval(&a, &b), k.eval(&b, &a));
            prop_assert_eq!(k.eval(&a, &a), 1.5);
        }

        #[test]
        fn linear_in_weights(seed in 0u64..1000, c in -3.0f64..3.0, x1 in -3.0f64..3.0, x2 in -3.0f64..3.0) {
            let f1 = random_function(seed, 5);
            let f2 = f1.with_weights(random_function(seed + 1, 5).weights().clone());
            let sum = f1.with_weights(f1.weights() + f2.weights());
            let x = v(&[x1, x2]);
            prop_assert!((sum.value(&x) - f1.value(&x) - f2.value(&x)).abs() < 1e-12);
            let scaled = f1.with_weights(f1.weights() * c);
            prop_assert!((scaled.value(&x) - c * f1.value(&x)).abs() < 1e-12);
            prop_assert!((scaled.gradient(&x) - f1.gradient(&x) * c).amax() < 1e-12);
            let n1 = f1.rkhs_norm_sq().unwrap();
            prop_assert!((scaled.rkhs_norm_sq().unwrap() - c * c * n1).abs() < 1e-10 * (1.0 + n1 * c * c));
        }

        #[test]
        fn directional_derivative_matches(seed in 0u64..1000, d1 in -1.0f64..1.0, d2 in -1.0f64..1.0) {
            let f = random_function(seed, 6);
            let x = v(&[0.2, -0.4]);
            let dir = v(&[d1, d2]);
            let h = 1e-5;
            let fd = (f.value(&(&x + &dir * h)) - f.value(&(&x - &dir * h))) / (2.0 * h);
            let an = f.gradient(&x).dot(&dir);
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2));
        }
    }
}
