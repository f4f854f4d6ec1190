//! Closed-form control law of a candidate CLF, `π̂(x) = -β [∇V(f(x)) g(x)]ᵀ`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernel::RkhsFunction;
use crate::systems::{ControlAffineSystem, Policy};

/// A differentiable scalar function of the state.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl ScalarField for RkhsFunction {
    fn dim(&self) -> usize {
        RkhsFunction::dim(self)
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        RkhsFunction::value(self, x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        RkhsFunction::gradient(self, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClfPolicy<'a, V: ScalarField + ?Sized> {
    value: &'a V,
    beta: f64,
    system: &'a ControlAffineSystem,
}

impl<'a, V: ScalarField + ?Sized> ClfPolicy<'a, V> {
    pub fn new(value: &'a V, beta: f64, system: &'a ControlAffineSystem) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("policy gain must be positive, got {beta}")));
        }
        if value.dim() != system.state_dim() {
            return Err(Error::DimensionMismatch { expected: system.state_dim(), got: value.dim() });
        }
        Ok(Self { value, beta, system })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn value_function(&self) -> &'a V {
        self.value
    }

    pub fn system(&self) -> &'a ControlAffineSystem {
        self.system
    }

    /// `π̂(x)`.
    pub fn action(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let fx = self.system.drift(x);
        let g = self.system.input_gain(x);
        self.action_from(x, &fx, &g)
    }

    fn action_from(&self, x: &DVector<f64>, fx: &DVector<f64>, g: &nalgebra::DMatrix<f64>) -> Result<DVector<f64>> {
        let grad = self.value.gradient(fx);
        let u = g.tr_mul(&grad) * -self.beta;
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "CLF policy", state: x.as_slice().to_vec() });
        }
        Ok(u)
    }

    /// `f(x) + g(x) π̂(x)` without the containment check on `x`.
    pub fn next_state(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let fx = self.system.drift(x);
        let g = self.system.input_gain(x);
        let u = self.action_from(x, &fx, &g)?;
        let next = fx + g * u;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "closed loop", state: x.as_slice().to_vec() });
        }
        Ok(next)
    }

    /// One step of the deterministic closed loop, `step(x, π̂(x))`.
    pub fn closed_loop_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.action(x)?;
        self.system.step(x, &u)
    }
}

impl<V: ScalarField + ?Sized> Policy for ClfPolicy<'_, V> {
    fn action(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ClfPolicy::action(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::rng::stream;
    use crate::systems::{builtin_lqr_system, builtin_nonlinear_system};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    struct Quadratic(DMatrix<f64>);

    impl ScalarField for Quadratic {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn value(&self, x: &DVector<f64>) -> f64 {
            x.dot(&(&self.0 * x))
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            (&self.0 + self.0.transpose()) * x
        }
    }

    fn random_rkhs(seed: u64) -> RkhsFunction {
        let mut rng = stream(seed, "policy-test", 0);
        let centers: Vec<DVector<f64>> =
            (0..6).map(|_| DVector::from_fn(2, |_, _| rng.random_range(0.0..5.0))).collect();
        let w = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
        RkhsFunction::new(Kernel::squared_exponential(1.2, 1.0).unwrap(), &centers, w).unwrap()
    }

    #[test]
    fn zero_function_gives_zero_action_and_drift() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let f = random_rkhs(1);
        let zero = f.with_weights(DVector::zeros(6));
        let p = ClfPolicy::new(&zero, 0.2, &sys).unwrap();
        let x = v(&[1.0, 3.0]);
        assert_eq!(p.action(&x).unwrap(), DVector::zeros(2));
        assert_eq!(p.closed_loop_map(&x).unwrap(), sys.drift(&x));
    }

    #[test]
    fn quadratic_value_on_linear_system() {
        let sys = builtin_lqr_system();
        let pm = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let q = Quadratic(pm.clone());
        let beta = 0.2;
        let p = ClfPolicy::new(&q, beta, &sys).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
        let b = DMatrix::<f64>::identity(2, 2);
        let x = v(&[1.5, -2.0]);
        let expected = b.transpose() * &pm * &a * &x * (-2.0 * beta);
        assert!((p.action(&x).unwrap() - expected).amax() < 1e-14);
    }

    #[test]
    fn doubling_beta_doubles_action() {
        let sys = builtin_nonlinear_system(None).unwrap();
        let f = random_rkhs(2);
        let x = v(&[2.0, 1.0]);
        let a1 = ClfPolicy::new(&f, 0.2, &sys).unwrap().action(&x).unwrap();
        let a2 = ClfPolicy::new(&f, 0.4, &sys).unwrap().action(&x).unwrap();
        assert_eq!(a2, a1 * 2.0);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let sys = builtin_lqr_system();
        let q = Quadratic(DMatrix::identity(2, 2));
        let p = ClfPolicy::new(&q, 0.2, &sys).unwrap();
        assert_eq!(p.closed_loop_map(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn rejects_nonpositive_gain() {
        let sys = builtin_lqr_system();
        let q = Quadratic(DMatrix::identity(2, 2));
        assert!(ClfPolicy::new(&q, 0.0, &sys).is_err());
    }

    proptest! {
        #[test]
        fn action_is_linear_in_weights(seed in 0u64..500, x1 in -0.5f64..5.5, x2 in -0.5f64..5.5) {
            let sys = builtin_nonlinear_system(None).unwrap();
            let f1 = random_rkhs(seed);
            let f2 = f1.with_weights(random_rkhs(seed + 1).weights().clone());
            let sum = f1.with_weights(f1.weights() + f2.weights());
            let x = v(&[x1, x2]);
            let act = |f: &RkhsFunction| ClfPolicy::new(f, 0.2, &sys).unwrap().action(&x).unwrap();
            prop_assert!((act(&sum) - act(&f1) - act(&f2)).amax() < 1e-12);
        }

        #[test]
        fn action_descends_through_input_channel(seed in 0u64..500, x1 in -0.5f64..5.5, x2 in -0.5f64..5.5) {
            let sys = builtin_nonlinear_system(None).unwrap();
            let f = random_rkhs(seed);
            let beta = 0.2;
            let x = v(&[x1, x2]);
            let u = ClfPolicy::new(&f, beta, &sys).unwrap().action(&x).unwrap();
            let row = sys.input_gain(&x).tr_mul(&f.gradient(&sys.drift(&x)));
            let lhs = row.dot(&u);
            prop_assert!((lhs + beta * row.norm_squared()).abs() <= 1e-12 * (1.0 + row.norm_squared()));
            prop_assert!(lhs <= 0.0);
        }
    }
}
