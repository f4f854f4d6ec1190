//! Augmented-Lagrangian solver with a preconditioned L-BFGS inner loop.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::problem::RegressionProblem;
use crate::error::{Error, Result};

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub tolerance: f64,
    pub merit_weight: f64,
}

/// Per-outer-iteration record. Index 0 is the starting point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub loss: Vec<f64>,
    pub violation: Vec<f64>,
    pub merit: Vec<f64>,
    pub penalty: Vec<f64>,
    pub accepted: Vec<bool>,
    pub inner_iterations: Vec<usize>,
    /// Iterate after each outer iteration (the current accepted point).
    #[serde(skip)]
    pub alpha: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub alpha: DVector<f64>,
    pub loss: f64,
    pub max_violation: f64,
    pub worst_constraint: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub trace: SolveTrace,
}

#[derive(Debug, Clone, Copy)]
pub struct InnerResult {
    pub value: f64,
    pub iterations: usize,
}

/// Approximate Hessian factor used as the initial inverse-Hessian guess.
pub type Preconditioner<'a> = &'a dyn Fn(&DVector<f64>) -> Result<Cholesky<f64, Dyn>>;

/// Minimises `f` from `x` in place with L-BFGS and Armijo backtracking.
/// Non-finite trial values shrink the step; if no finite trial value is
/// found the error carries the values seen during the search. When given,
/// `precondition` is re-evaluated at every accepted iterate.
pub fn lbfgs<F>(
    f: F,
    precondition: Option<Preconditioner>,
    x: &mut DVector<f64>,
    max_iters: usize,
    tolerance: f64,
    outer: usize,
) -> Result<InnerResult>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut value, mut grad) = f(x)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { context: "objective at start of inner solve", state: x.as_slice().to_vec() });
    }
    let mut memory: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut iterations = 0;
    while iterations < max_iters {
        if grad.amax() <= tolerance * value.abs().max(1.0) {
            break;
        }
        let factor = precondition.map(|p| p(x)).transpose()?;
        let mut dir = two_loop(&grad, &memory, factor.as_ref());
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            memory.clear();
            dir = -&grad;
            slope = -grad.norm_squared();
        }
        let mut step = 1.0;
        let mut trace = Vec::new();
        let mut found = None;
        let mut saw_finite = false;
        while step >= MIN_STEP {
            let trial = &*x + &dir * step;
            if trial == *x {
                break;
            }
            let (v, g) = f(&trial)?;
            trace.push(v);
            if v.is_finite() && g.iter().all(|c| c.is_finite()) {
                saw_finite = true;
                if v <= value + ARMIJO_C * step * slope {
                    found = Some((trial, v, g));
                    break;
                }
            }
            step *= BACKTRACK;
        }
        iterations += 1;
        let Some((trial, v, g)) = found else {
            if !saw_finite {
                return Err(Error::LineSearchNaN { outer, inner: iterations, trace });
            }
            break;
        };
        let s = &trial - &*x;
        let y = &g - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        } else {
            // stale curvature pairs stall progress without a Wolfe search
            memory.clear();
        }
        let previous = value;
        *x = trial;
        value = v;
        grad = g;
        if previous - value <= 1e-15 * previous.abs().max(1e-300) {
            break;
        }
    }
    Ok(InnerResult { value, iterations })
}

fn two_loop(
    grad: &DVector<f64>,
    memory: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    factor: Option<&Cholesky<f64, Dyn>>,
) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some(c) = factor {
        q = c.solve(&q);
    } else if let Some((s, y, _)) = memory.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

struct Evaluation {
    loss: f64,
    constraints: Vec<f64>,
}

impl Evaluation {
    fn violation(&self) -> f64 {
        self.constraints.iter().fold(0.0_f64, |m, c| m.max(*c))
    }

    fn worst(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.constraints.iter().enumerate() {
            if *c > self.constraints[best] {
                best = i;
            }
        }
        best
    }

    fn merit(&self, weight: f64) -> f64 {
        self.loss + weight * self.constraints.iter().map(|c| c.max(0.0)).sum::<f64>()
    }
}

fn evaluate(problem: &RegressionProblem, alpha: &DVector<f64>, tightening: f64) -> Result<Evaluation> {
    Ok(Evaluation { loss: problem.loss(alpha)?, constraints: problem.constraint_values(alpha, tightening)? })
}

/// `loss + Σ (1/2ρ)[max(0, μ + ρc)² − μ²]` and its gradient.
fn augmented_lagrangian(
    problem: &RegressionProblem,
    alpha: &DVector<f64>,
    tightening: f64,
    multipliers: &[f64],
    penalty: f64,
) -> Result<(f64, DVector<f64>)> {
    let (mut value, mut grad) = problem.loss_and_gradient(alpha)?;
    let cons = problem.constraints_and_gradients(alpha, tightening)?;
    for ((c, dc), mu) in cons.iter().zip(multipliers) {
        let shifted = (mu + penalty * c).max(0.0);
        value += (shifted * shifted - mu * mu) / (2.0 * penalty);
        if shifted > 0.0 {
            grad.axpy(shifted, dc, 1.0);
        }
    }
    Ok((value, grad))
}

/// Gauss-Newton model of the augmented Lagrangian:
/// `H_loss + ρ Σ_active ∇c ∇cᵀ`, with a small ridge until it factors.
fn al_preconditioner(
    problem: &RegressionProblem,
    loss_hessian: &DMatrix<f64>,
    alpha: &DVector<f64>,
    tightening: f64,
    multipliers: &[f64],
    penalty: f64,
) -> Result<Cholesky<f64, Dyn>> {
    let cons = problem.constraints_and_gradients(alpha, tightening)?;
    let active: Vec<DVector<f64>> = cons
        .into_iter()
        .zip(multipliers)
        .filter(|((c, _), mu)| *mu + penalty * c > 0.0)
        .map(|((_, dc), _)| dc)
        .collect();
    let mut b = loss_hessian.clone();
    if !active.is_empty() {
        let g = DMatrix::from_columns(&active);
        b.gemm(penalty, &g, &g.transpose(), 1.0);
    }
    let scale = b.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut ridge = 1e-10 * scale;
    for _ in 0..12 {
        let mut shifted = b.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        ridge *= 10.0;
    }
    Err(Error::NonFinite { context: "augmented-Lagrangian preconditioner", state: alpha.as_slice().to_vec() })
}

/// Solves the constrained regression from `alpha0`.
///
/// Outer iterates are accepted only when the merit
/// `loss + merit_weight · Σ max(0, c_i)` does not increase; a rejected
/// iterate keeps the multipliers and grows the penalty.
pub fn solve_constrained(
    problem: &RegressionProblem,
    tightening: f64,
    alpha0: DVector<f64>,
    settings: &SolverSettings,
) -> Result<SolveOutcome> {
    let mut alpha = alpha0;
    let mut current = evaluate(problem, &alpha, tightening)?;
    let initial_loss = current.loss;
    let mut merit = current.merit(settings.merit_weight);
    let mut multipliers = vec![0.0; current.constraints.len()];
    let mut penalty = settings.initial_penalty;
    let mut trace = SolveTrace::default();
    let push = |trace: &mut SolveTrace,
                e: &Evaluation,
                merit: f64,
                penalty: f64,
                accepted: bool,
                inner: usize,
                a: &DVector<f64>| {
        trace.loss.push(e.loss);
        trace.violation.push(e.violation());
        trace.merit.push(merit);
        trace.penalty.push(penalty);
        trace.accepted.push(accepted);
        trace.inner_iterations.push(inner);
        trace.alpha.push(a.clone());
    };
    push(&mut trace, &current, merit, penalty, true, 0, &alpha);

    let mut converged = false;
    let mut outer = 0;
    let mut reference_violation = current.violation();
    let loss_hessian = problem.loss_hessian();
    while outer < settings.max_outer_iters {
        outer += 1;
        let mut candidate = alpha.clone();
        let precondition =
            |a: &DVector<f64>| al_preconditioner(problem, &loss_hessian, a, tightening, &multipliers, penalty);
        let inner = lbfgs(
            |a| augmented_lagrangian(problem, a, tightening, &multipliers, penalty),
            Some(&precondition),
            &mut candidate,
            settings.max_inner_iters,
            settings.tolerance,
            outer,
        )?;
        let next = evaluate(problem, &candidate, tightening)?;
        let next_merit = next.merit(settings.merit_weight);
        let accepted = next_merit <= merit;
        if accepted {
            let previous_loss = current.loss;
            for (mu, c) in multipliers.iter_mut().zip(&next.constraints) {
                *mu = (*mu + penalty * c).max(0.0);
            }
            let violation = next.violation();
            if violation > 0.25 * reference_violation {
                penalty *= settings.penalty_growth;
            }
            reference_violation = violation;
            alpha = candidate;
            current = next;
            merit = next_merit;
            let scale = previous_loss.abs().max(1e-10 * initial_loss.abs()).max(f64::MIN_POSITIVE);
            let relative_change = (current.loss - previous_loss).abs() / scale;
            push(&mut trace, &current, merit, penalty, true, inner.iterations, &alpha);
            if violation < settings.tolerance && relative_change < settings.tolerance {
                converged = true;
                break;
            }
        } else {
            penalty *= settings.penalty_growth;
            push(&mut trace, &current, merit, penalty, false, inner.iterations, &alpha);
            // the inner solve could not improve on a feasible iterate
            if current.violation() < settings.tolerance && next_merit - merit <= settings.tolerance * merit.abs() {
                converged = true;
                break;
            }
        }
        log::debug!(
            "outer {outer}: loss {:.6e} violation {:.3e} penalty {:.1e} accepted {accepted}",
            current.loss,
            current.violation(),
            penalty
        );
    }

    let max_violation = current.violation();
    let worst_constraint = current.worst();
    if !converged && max_violation >= settings.tolerance {
        let index = problem.constraints()[worst_constraint].grid_index();
        return Err(Error::Infeasible {
            index,
            point: problem.grid_point(index).as_slice().to_vec(),
            violation: max_violation,
            iterations: outer,
        });
    }
    if !converged {
        log::warn!("loss did not settle within {outer} outer iterations; constraints are satisfied");
    }
    Ok(SolveOutcome {
        alpha,
        loss: current.loss,
        max_violation,
        worst_constraint,
        outer_iterations: outer,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lbfgs_minimises_rosenbrock() {
        let f = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Ok((v, g))
        };
        let mut x = DVector::from_vec(vec![-1.2, 1.0]);
        let r = lbfgs(f, None, &mut x, 500, 1e-12, 0).unwrap();
        assert!(r.value < 1e-16, "{} after {} iterations at {x:?}", r.value, r.iterations);
        assert!((x[0] - 1.0).abs() < 1e-7 && (x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn lbfgs_recovers_from_non_finite_trials() {
        // log barrier: infinite outside (0, ∞), minimum at 1
        let f = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let t = x[0];
            if t <= 0.0 {
                return Ok((f64::NAN, DVector::from_element(1, f64::NAN)));
            }
            Ok((t - t.ln(), DVector::from_element(1, 1.0 - 1.0 / t)))
        };
        let mut x = DVector::from_element(1, 8.0);
        lbfgs(f, None, &mut x, 100, 1e-12, 0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lbfgs_reports_nan_everywhere() {
        let f = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            if x[0] == 3.0 {
                Ok((1.0, DVector::from_element(1, 1.0)))
            } else {
                Ok((f64::NAN, DVector::from_element(1, f64::NAN)))
            }
        };
        let mut x = DVector::from_element(1, 3.0);
        match lbfgs(f, None, &mut x, 10, 1e-12, 4) {
            Err(Error::LineSearchNaN { outer, inner, trace }) => {
                assert_eq!((outer, inner), (4, 1));
                assert!(!trace.is_empty() && trace.iter().all(|v| v.is_nan()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
