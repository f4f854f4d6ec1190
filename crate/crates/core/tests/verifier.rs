mod common;

use clf_irl::learner::{solve, LearnedModel};
use clf_irl::systems::PerturbationModel;
use clf_irl::verifier::{audit_convergence, audit_dense, audit_grid, audit_grid_with, GridAuditSettings};
use common::{lqr, nonlinear, Setup};
use nalgebra::DVector;

fn learned(s: &Setup) -> (LearnedModel, PerturbationModel) {
    let model = solve(&s.data, &s.system, &s.grid, &s.config, &s.kernel).unwrap();
    let pm = s.config.perturbation(&s.system).unwrap();
    (model, pm)
}

fn flattened(model: &LearnedModel) -> LearnedModel {
    let mut flat = model.clone();
    flat.value = model.value.with_weights(DVector::zeros(model.value.num_centers()));
    flat
}

#[test]
fn learned_lqr_model_passes_every_audit() {
    let s = lqr(120, 11, 7);
    let (model, pm) = learned(&s);
    let grid = audit_grid(&model, &model.grid, &s.system, &pm).unwrap();
    assert!(grid.pass, "worst margin {}", grid.worst_margin);
    assert_eq!(grid.decrease.len(), s.grid.len());
    assert_eq!(grid.worst_point.as_deref(), grid.worst_index.map(|i| s.grid.points[i].as_slice()));
    let dense = audit_dense(&model, &s.system, &pm, 4).unwrap();
    assert_eq!(dense.violations, 0);
    assert_eq!(dense.points_checked + dense.excluded, 41 * 41);
    let conv = audit_convergence(&model, &s.system, &pm, 50, 500, 7).unwrap();
    assert_eq!(conv.fraction, 1.0);
    assert_eq!(conv.escaped, 0);
}

#[test]
fn constant_function_fails_the_decrease_audits() {
    let s = lqr(40, 7, 2);
    let (model, pm) = learned(&s);
    let flat = flattened(&model);
    let grid = audit_grid(&flat, &flat.grid, &s.system, &pm).unwrap();
    assert!(!grid.pass);
    assert!(grid.worst_margin <= 0.0);
    assert!(grid.decrease.iter().all(|d| *d == 0.0));
    let dense = audit_dense(&flat, &s.system, &pm, 2).unwrap();
    assert!(!dense.pass);
    assert_eq!(dense.violations, dense.points_checked);
}

#[test]
fn infinite_tightening_fails_the_grid_audit() {
    let s = lqr(40, 7, 3);
    let (model, pm) = learned(&s);
    let mut grid = model.grid.clone();
    grid.tightening = f64::INFINITY;
    let audit = audit_grid(&model, &grid, &s.system, &pm).unwrap();
    assert!(!audit.pass);
    assert_eq!(audit.worst_margin, f64::NEG_INFINITY);
}

#[test]
fn dense_refinement_below_two_is_rejected() {
    let s = lqr(20, 5, 4);
    let (model, pm) = learned(&s);
    assert!(audit_dense(&model, &s.system, &pm, 1).is_err());
    assert!(audit_dense(&model, &s.system, &pm, 0).is_err());
}

#[test]
fn zero_horizon_counts_only_starts_inside_the_ball() {
    let s = lqr(20, 5, 5);
    let (model, pm) = learned(&s);
    let conv = audit_convergence(&model, &s.system, &pm, 64, 0, 1).unwrap();
    let radius = model.grid.grid_constant;
    let inside = conv.starts.iter().filter(|x| (*x - s.system.target()).norm() <= radius).count();
    assert_eq!(conv.fraction, inside as f64 / 64.0);
    assert!(conv.hitting_times.iter().flatten().all(|t| *t == 0));
    assert!(audit_convergence(&model, &s.system, &pm, 0, 10, 1).is_err());
}

#[test]
fn audits_are_repeatable_and_leave_the_model_unchanged() {
    let s = nonlinear(6);
    let (model, pm) = learned(&s);
    let before = model.clone();
    let a = audit_grid(&model, &model.grid, &s.system, &pm).unwrap();
    let b = audit_grid(&model, &model.grid, &s.system, &pm).unwrap();
    assert_eq!(a, b);
    let d1 = audit_dense(&model, &s.system, &pm, 3).unwrap();
    let d2 = audit_dense(&model, &s.system, &pm, 3).unwrap();
    assert_eq!(d1, d2);
    let c1 = audit_convergence(&model, &s.system, &pm, 20, 200, 9).unwrap();
    let c2 = audit_convergence(&model, &s.system, &pm, 20, 200, 9).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(model, before);
}

#[test]
fn fresh_audit_uses_more_draws_than_training() {
    let s = nonlinear(5);
    let (model, pm) = learned(&s);
    let fresh = GridAuditSettings::fresh(&model);
    let training = GridAuditSettings::training(&model);
    assert!(fresh.samples > training.samples);
    assert_ne!(fresh.stream, training.stream);
    let audit = audit_grid_with(&model, &model.grid, &s.system, &pm, &fresh).unwrap();
    assert_eq!(audit.samples, fresh.samples);
    assert_eq!(audit.stream, fresh.stream);
}

#[test]
fn convergence_starts_depend_only_on_the_seed() {
    let s = lqr(20, 5, 6);
    let (model, pm) = learned(&s);
    let a = audit_convergence(&model, &s.system, &pm, 10, 5, 42).unwrap();
    let b = audit_convergence(&flattened(&model), &s.system, &pm, 10, 5, 42).unwrap();
    let c = audit_convergence(&model, &s.system, &pm, 10, 5, 43).unwrap();
    assert_eq!(a.starts, b.starts);
    assert_ne!(a.starts, c.starts);
    assert!(a.starts.iter().all(|x| s.system.bounds().contains(x)));
}

#[test]
fn dimension_mismatch_is_reported() {
    let s = lqr(20, 5, 7);
    let (model, _) = learned(&s);
    let other = nonlinear(4);
    let pm = other.config.perturbation(&other.system).unwrap();
    let mut foreign = model.clone();
    foreign.value = other_dim_function();
    assert!(audit_grid(&foreign, &model.grid, &s.system, &pm).is_err());
    assert!(audit_dense(&foreign, &s.system, &pm, 2).is_err());
    assert!(audit_convergence(&foreign, &s.system, &pm, 3, 3, 0).is_err());
}

fn other_dim_function() -> clf_irl::kernel::RkhsFunction {
    let kernel = clf_irl::kernel::Kernel::squared_exponential(1.0, 1.0).unwrap();
    let centers = vec![DVector::from_row_slice(&[0.0, 0.0, 0.0])];
    clf_irl::kernel::RkhsFunction::new(kernel, &centers, DVector::from_element(1, 1.0)).unwrap()
}
