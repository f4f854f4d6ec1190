//! The experiment pipeline: data, learning, certification and export.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clf_irl::learner::{build_grid, expected_decrease, lattice_points, noise_draws, solve, LearnedModel};
use clf_irl::lqr::{generate_demonstrations, quadratic_value, solve_dare};
use clf_irl::policy::ScalarField;
use clf_irl::rng;
use clf_irl::systems::{simulate_until, ControlAffineSystem, Trajectory};
use clf_irl::verifier::{audit_convergence, audit_dense, audit_grid, CertReport};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::spec::{DataSource, ExperimentSpec, SystemSetup};
use crate::trajectory_csv::{ingest_trajectories, write_table, write_trajectories};

pub const MODEL_FILE: &str = "model.json";
pub const CERT_FILE: &str = "cert_report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SPEC_FILE: &str = "spec.toml";
pub const TRAINING_FILE: &str = "training_data.csv";
pub const SURFACE_FILE: &str = "surface.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const DECREASE_FILE: &str = "decrease.csv";
pub const ROLLOUTS_FILE: &str = "rollouts.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const MANIFEST_FILE: &str = "MANIFEST";

/// Quantities reported after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub trajectories: usize,
    pub transitions: usize,
    pub lambda: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean `‖x_t - closed_loop_map(x_{t-1})‖` over the demonstration transitions.
    pub reproduction_error: f64,
    /// The same error for the drift alone.
    pub drift_error: f64,
    pub reproduction_ratio: f64,
    /// Mean cosine between learned and ground-truth gradients at the
    /// transition sources, when a ground truth exists.
    pub gradient_cosine: Option<f64>,
    pub certified: bool,
}

/// Progress record written to `MANIFEST` after every stage.
pub struct Manifest {
    path: PathBuf,
    header: Vec<String>,
    stages: Vec<String>,
    files: Vec<String>,
}

impl Manifest {
    pub fn new(dir: &Path, spec: &ExperimentSpec) -> Self {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            path: dir.join(MANIFEST_FILE),
            header: vec![
                format!("experiment: {}", spec.name),
                format!("seed: {}", spec.seed),
                format!("created_unix: {created}"),
            ],
            stages: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn add_files(&mut self, files: &[&str]) {
        self.files.extend(files.iter().map(|f| f.to_string()));
    }

    pub fn complete_stage(&mut self, stage: &str, started: Instant) -> CliResult<()> {
        self.stages.push(format!("stage {stage}: complete ({:.3} s)", started.elapsed().as_secs_f64()));
        self.write(None)
    }

    pub fn write(&self, status: Option<&str>) -> CliResult<()> {
        let mut text = self.header.join("\n");
        text.push('\n');
        for s in &self.stages {
            text.push_str(s);
            text.push('\n');
        }
        text.push_str(&format!("status: {}\n", status.unwrap_or("running")));
        for f in &self.files {
            text.push_str(&format!("file: {f}\n"));
        }
        std::fs::write(&self.path, text).map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::file(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_model(path: &Path) -> CliResult<LearnedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, e.to_string()))
}

/// Demonstrations from the experiment's data source.
pub fn load_data(spec: &ExperimentSpec, setup: &SystemSetup) -> CliResult<Vec<Trajectory>> {
    let system = &setup.system;
    match &spec.data {
        DataSource::File { path } => ingest_trajectories(path, system),
        DataSource::LqrOptimal { n_points } => {
            let problem = setup
                .ground_truth
                .as_ref()
                .ok_or_else(|| CliError::Config("lqr_optimal data needs a system with LQR cost matrices".into()))?;
            let dare = solve_dare(problem).map_err(|e| CliError::Config(e.to_string()))?;
            generate_demonstrations(system, &dare.k, *n_points, spec.seed).map_err(|e| CliError::Config(e.to_string()))
        }
        DataSource::PotentialField(field) => field.generate(system),
    }
}

pub fn learn(spec: &ExperimentSpec, system: &ControlAffineSystem, data: &[Trajectory]) -> CliResult<LearnedModel> {
    let grid = build_grid(system.bounds(), &spec.grid.resolution, system.target())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let kernel = spec.kernel()?;
    solve(data, system, &grid, &spec.learner_config(), &kernel).map_err(CliError::Learner)
}

/// Runs the grid, dense and convergence audits and stores them in the model.
pub fn certify(spec: &ExperimentSpec, system: &ControlAffineSystem, model: &mut LearnedModel) -> CliResult<CertReport> {
    let audit_err = |e: clf_irl::Error| CliError::Certification(e.to_string());
    let pm = model.training.config.perturbation(system).map_err(audit_err)?;
    let grid = audit_grid(model, &model.grid, system, &pm).map_err(audit_err)?;
    let dense = audit_dense(model, system, &pm, spec.certify.dense_refinement).map_err(audit_err)?;
    let convergence = audit_convergence(model, system, &pm, spec.certify.rollouts, spec.certify.horizon, spec.seed)
        .map_err(audit_err)?;
    let report = &mut model.certification;
    report.seeds.grid_audit = Some(grid.seed);
    report.seeds.dense_audit = Some(dense.seed);
    report.seeds.convergence = Some(convergence.seed);
    report.grid = Some(grid);
    report.dense = Some(dense);
    report.convergence = Some(convergence);
    Ok(report.clone())
}

/// Human-readable reasons a report does not pass.
pub fn failures(report: &CertReport) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(g) = report.grid.as_ref().filter(|g| !g.pass) {
        out.push(format!("grid audit worst margin {:e} at {:?}", g.worst_margin, g.worst_point));
    }
    if let Some(d) = report.dense.as_ref().filter(|d| !d.pass) {
        out.push(format!(
            "dense audit found {} violations, worst {:e} at {:?}",
            d.violations, d.worst_decrease, d.worst_point
        ));
    }
    if let Some(c) = report.convergence.as_ref().filter(|c| c.fraction < 1.0) {
        out.push(format!(
            "{} of {} rollouts converged ({} escaped)",
            (c.fraction * c.n_rollouts as f64).round(),
            c.n_rollouts,
            c.escaped
        ));
    }
    out
}

/// Mean one-step reproduction error of the learned closed loop and of the drift.
pub fn reproduction_errors(
    model: &LearnedModel,
    system: &ControlAffineSystem,
    data: &[Trajectory],
) -> CliResult<(f64, f64)> {
    let policy = model.policy(system).map_err(CliError::Learner)?;
    let (mut learned, mut drift, mut count) = (0.0, 0.0, 0usize);
    for traj in data {
        for (a, b) in traj.transitions() {
            learned += (b - policy.closed_loop_map(a).map_err(CliError::Learner)?).norm();
            drift += (b - system.drift(a)).norm();
            count += 1;
        }
    }
    let count = count.max(1) as f64;
    Ok((learned / count, drift / count))
}

/// Mean cosine between `∇V` and `∇V*` at the transition sources. Points where
/// either gradient vanishes are skipped.
pub fn gradient_cosine<V: ScalarField, W: ScalarField>(learned: &V, truth: &W, data: &[Trajectory]) -> f64 {
    let cosines: Vec<f64> = data
        .iter()
        .flat_map(|t| t.transitions().map(|(a, _)| a))
        .filter_map(|x| {
            let (g, h) = (learned.gradient(x), truth.gradient(x));
            let norm = g.norm() * h.norm();
            (norm > 0.0).then(|| g.dot(&h) / norm)
        })
        .collect();
    cosines.iter().sum::<f64>() / cosines.len().max(1) as f64
}

pub fn summarize(
    spec: &ExperimentSpec,
    setup: &SystemSetup,
    model: &LearnedModel,
    data: &[Trajectory],
) -> CliResult<RunSummary> {
    let (reproduction_error, drift_error) = reproduction_errors(model, &setup.system, data)?;
    let gradient_cosine = match &setup.ground_truth {
        Some(problem) => {
            let dare = solve_dare(problem).map_err(|e| CliError::Config(e.to_string()))?;
            Some(gradient_cosine(&model.value, &quadratic_value(dare.p), data))
        }
        None => None,
    };
    Ok(RunSummary {
        name: spec.name.clone(),
        seed: spec.seed,
        trajectories: data.len(),
        transitions: data.iter().map(Trajectory::horizon).sum(),
        lambda: model.training.lambda,
        initial_loss: model.training.initial_loss,
        final_loss: model.training.final_loss,
        reproduction_error,
        drift_error,
        reproduction_ratio: reproduction_error / drift_error,
        gradient_cosine,
        certified: model.certification.passed(),
    })
}

/// Writes the plot grids and rollouts; returns the file names written.
pub fn export_plotdata(
    spec: &ExperimentSpec,
    setup: &SystemSetup,
    model: &LearnedModel,
    dir: &Path,
) -> CliResult<Vec<&'static str>> {
    let system = &setup.system;
    let n = system.state_dim();
    let m = system.input_dim();
    let bounds = system.bounds();
    let points = lattice_points(bounds.lower().as_slice(), bounds.upper().as_slice(), &vec![spec.export.resolution; n]);
    let coords: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let header = |extra: &[String]| -> Vec<String> { coords.iter().chain(extra).cloned().collect() };
    let row = |x: &DVector<f64>, extra: &[f64]| -> Vec<f64> { x.iter().chain(extra).copied().collect() };
    let learner_err = |e: clf_irl::Error| CliError::Learner(e);
    let mut written = Vec::new();

    let surface: Vec<Vec<f64>> = points.par_iter().map(|x| row(x, &[model.value.value(x)])).collect();
    write_table(&dir.join(SURFACE_FILE), &header(&["V".into()]), &surface)?;
    written.push(SURFACE_FILE);

    let policy = model.policy(system).map_err(learner_err)?;
    let actions = points
        .par_iter()
        .map(|x| policy.action(x).map(|u| row(x, u.as_slice())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(learner_err)?;
    let inputs: Vec<String> = (1..=m).map(|i| format!("u{i}")).collect();
    write_table(&dir.join(POLICY_FILE), &header(&inputs), &actions)?;
    written.push(POLICY_FILE);

    let config = &model.training.config;
    let pm = config.perturbation(system).map_err(learner_err)?;
    let decrease = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let draws = noise_draws(spec.seed, "export-decrease", i as u64, config.mc_samples, m, &pm);
            expected_decrease(&model.value, x, system, &pm, model.beta, &draws).map(|d| row(x, &[d]))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(learner_err)?;
    write_table(&dir.join(DECREASE_FILE), &header(&["E[dV]".into()]), &decrease)?;
    written.push(DECREASE_FILE);

    if let Some(problem) = &setup.ground_truth {
        let dare = solve_dare(problem).map_err(|e| CliError::Config(e.to_string()))?;
        let truth = quadratic_value(dare.p);
        let rows: Vec<Vec<f64>> = points.iter().map(|x| row(x, &[truth.value(x)])).collect();
        write_table(&dir.join(GROUND_TRUTH_FILE), &header(&["Vstar".into()]), &rows)?;
        written.push(GROUND_TRUTH_FILE);
    }

    let mut noise = pm.clone();
    noise.rng_seed = rng::derive_seed(spec.seed, "export-noise", 0);
    let radius = model.grid.grid_constant;
    let target = system.target();
    let rollouts = (0..spec.export.rollouts)
        .into_par_iter()
        .map(|i| {
            let x0 = bounds.sample(&mut rng::stream(spec.seed, "export-rollouts", i as u64));
            simulate_until(system, &policy, &noise, &x0, spec.rollout_horizon(), i as u64, |x| {
                (x - target).norm() <= radius
            })
            .map(|r| Trajectory { id: format!("rollout-{i}"), ..r.trajectory })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(learner_err)?;
    write_trajectories(&dir.join(ROLLOUTS_FILE), &rollouts, n, m)?;
    written.push(ROLLOUTS_FILE);
    Ok(written)
}

/// Result of a complete run.
pub struct RunOutcome {
    pub model: LearnedModel,
    pub summary: RunSummary,
    pub output_dir: PathBuf,
}

/// Data, learning, certification and export. Artifacts of completed stages
/// are kept when a later stage fails; a certification failure is reported
/// after all artifacts are written.
pub fn run_experiment(spec: &ExperimentSpec) -> CliResult<RunOutcome> {
    spec.validate()?;
    let dir = spec.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut manifest = Manifest::new(&dir, spec);
    manifest.write(None)?;
    let mut stage = "setup";
    let result = run_stages(spec, &dir, &mut manifest, &mut stage);
    let status = match &result {
        Ok(outcome) if outcome.summary.certified => "complete".to_string(),
        Ok(outcome) => format!("complete, certification failed: {}", failures(&outcome.model.certification).join("; ")),
        Err(e) => format!("failed at {stage}: {e}"),
    };
    manifest.write(Some(&status))?;
    let outcome = result?;
    if !outcome.summary.certified {
        return Err(CliError::Certification(failures(&outcome.model.certification).join("; ")));
    }
    Ok(outcome)
}

fn run_stages(
    spec: &ExperimentSpec,
    dir: &Path,
    manifest: &mut Manifest,
    stage: &mut &'static str,
) -> CliResult<RunOutcome> {
    let t = Instant::now();
    let setup = spec.build_system()?;
    std::fs::write(dir.join(SPEC_FILE), spec.to_toml()?).map_err(|e| CliError::io(dir.join(SPEC_FILE), e))?;
    manifest.add_files(&[SPEC_FILE]);
    manifest.complete_stage("setup", t)?;

    *stage = "data";
    let t = Instant::now();
    let data = load_data(spec, &setup)?;
    let system = &setup.system;
    write_trajectories(&dir.join(TRAINING_FILE), &data, system.state_dim(), system.input_dim())?;
    manifest.add_files(&[TRAINING_FILE]);
    manifest.complete_stage("data", t)?;
    log::info!("{} trajectories loaded", data.len());

    *stage = "learn";
    let t = Instant::now();
    let mut model = learn(spec, system, &data)?;
    write_json(&dir.join(MODEL_FILE), &model)?;
    manifest.add_files(&[MODEL_FILE]);
    manifest.complete_stage("learn", t)?;
    log::info!("learned in {:.2} s, loss {:.6e}", t.elapsed().as_secs_f64(), model.training.final_loss);

    *stage = "certify";
    let t = Instant::now();
    let report = certify(spec, system, &mut model)?;
    write_json(&dir.join(CERT_FILE), &report)?;
    write_json(&dir.join(MODEL_FILE), &model)?;
    manifest.add_files(&[CERT_FILE]);
    manifest.complete_stage("certify", t)?;

    *stage = "export";
    let t = Instant::now();
    let files = export_plotdata(spec, &setup, &model, dir)?;
    let summary = summarize(spec, &setup, &model, &data)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    manifest.add_files(&files);
    manifest.add_files(&[SUMMARY_FILE]);
    manifest.complete_stage("export", t)?;

    Ok(RunOutcome { model, summary, output_dir: dir.to_path_buf() })
}
