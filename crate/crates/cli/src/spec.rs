//! Experiment description: system, data source, grid, kernel, learner and
//! certification settings. Loaded from TOML or JSON, or taken from a preset.

use std::path::{Path, PathBuf};

use clf_irl::kernel::Kernel;
use clf_irl::learner::{LearnerConfig, LipschitzMode, LossWeighting};
use clf_irl::lqr::LqrProblem;
use clf_irl::systems::{builtin_lqr_system, builtin_nonlinear_system, BoxBounds, ControlAffineSystem};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::demos::{BoxRegion, PotentialField};
use crate::error::{config_err, CliError, CliResult};
use crate::matrix_file::CoefficientFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Every random stream of the run is derived from this value.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub system: SystemSpec,
    pub data: DataSource,
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub certify: CertifySpec,
    #[serde(default)]
    pub export: ExportSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// The linear-quadratic benchmark on `[-5, 5]²`.
    Lqr,
    /// The two-dimensional nonlinear benchmark on `[-0.5, 5.5]²`.
    #[serde(rename = "nonlinear2d")]
    Nonlinear2d { target: Option<Vec<f64>> },
    /// `x⁺ = A x + B u` with matrices from a JSON coefficient file.
    Linear { coefficients: PathBuf, lower: Vec<f64>, upper: Vec<f64>, target: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Trajectory CSV file.
    File { path: PathBuf },
    /// One-step demonstrations of the optimal LQR policy from uniform states.
    LqrOptimal { n_points: usize },
    /// Deterministic potential-field demonstrator.
    PotentialField(PotentialField),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Points per axis of the stability grid.
    pub resolution: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengthscale {
    Isotropic(f64),
    PerAxis(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub lengthscale: Lengthscale,
    #[serde(default = "one")]
    pub signal_variance: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySpec {
    pub dense_refinement: usize,
    pub rollouts: usize,
    pub horizon: usize,
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self { dense_refinement: 4, rollouts: 100, horizon: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSpec {
    /// Points per axis of the plot grids.
    pub resolution: usize,
    /// Number of closed-loop rollouts written to `rollouts.csv`.
    pub rollouts: usize,
    /// Rollout length; the certification horizon when absent.
    pub horizon: Option<usize>,
}

impl Default for ExportSpec {
    fn default() -> Self {
        Self { resolution: 50, rollouts: 10, horizon: None }
    }
}

/// A built system with its LQR ground truth when one exists.
pub struct SystemSetup {
    pub system: ControlAffineSystem,
    pub ground_truth: Option<LqrProblem>,
}

pub const PRESETS: [&str; 2] = ["lqr", "nonlinear2d"];

impl ExperimentSpec {
    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "lqr" => Ok(lqr_preset()),
            "nonlinear2d" => Ok(nonlinear_preset()),
            other => Err(CliError::Config(format!("unknown preset '{other}' (available: {})", PRESETS.join(", ")))),
        }
    }

    /// Parses a TOML or JSON (by extension) spec. Relative paths inside the
    /// file are resolved against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut spec: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::file(path, e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| CliError::file(path, e.to_string()))?,
        };
        if let Some(dir) = path.parent() {
            spec.resolve_relative(dir);
        }
        Ok(spec)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::File { path } = &mut self.data {
            fix(path);
        }
        if let SystemSpec::Linear { coefficients, .. } = &mut self.system {
            fix(coefficients);
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks settings and the existence of referenced files.
    pub fn validate(&self) -> CliResult<()> {
        if self.learner.rng_seed != 0 && self.learner.rng_seed != self.seed {
            return Err(CliError::Config(
                "learner.rng_seed is derived from the top-level seed; set `seed` instead".into(),
            ));
        }
        self.learner_config().validate().map_err(config_err)?;
        if self.grid.resolution.iter().any(|r| *r < 2) {
            return Err(CliError::Config("grid resolution must be at least 2 per axis".into()));
        }
        if self.certify.dense_refinement < 2 {
            return Err(CliError::Config("dense_refinement must be at least 2".into()));
        }
        if self.certify.rollouts == 0 {
            return Err(CliError::Config("certify.rollouts must be at least 1".into()));
        }
        if self.export.resolution < 2 {
            return Err(CliError::Config("export.resolution must be at least 2".into()));
        }
        self.kernel().map(|_| ())?;
        if let DataSource::File { path } = &self.data {
            if !path.is_file() {
                return Err(CliError::file(path, "data file not found"));
            }
        }
        if let SystemSpec::Linear { coefficients, .. } = &self.system {
            if !coefficients.is_file() {
                return Err(CliError::file(coefficients, "coefficient file not found"));
            }
        }
        Ok(())
    }

    /// Learner settings with the seed taken from the experiment.
    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig { rng_seed: self.seed, ..self.learner.clone() }
    }

    pub fn kernel(&self) -> CliResult<Kernel> {
        let k = match &self.kernel.lengthscale {
            Lengthscale::Isotropic(l) => Kernel::squared_exponential(*l, self.kernel.signal_variance),
            Lengthscale::PerAxis(ls) => Kernel::squared_exponential_ard(ls.clone(), self.kernel.signal_variance),
        };
        k.map_err(config_err)
    }

    pub fn build_system(&self) -> CliResult<SystemSetup> {
        match &self.system {
            SystemSpec::Lqr => {
                Ok(SystemSetup { system: builtin_lqr_system(), ground_truth: Some(LqrProblem::benchmark()) })
            }
            SystemSpec::Nonlinear2d { target } => {
                let target = target.as_ref().map(|t| DVector::from_column_slice(t));
                let system = builtin_nonlinear_system(target).map_err(config_err)?;
                Ok(SystemSetup { system, ground_truth: None })
            }
            SystemSpec::Linear { coefficients, lower, upper, target } => {
                let file = CoefficientFile::load(coefficients)?;
                let bounds = BoxBounds::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
                    .map_err(config_err)?;
                let (a, b) = file.dynamics().map_err(|e| CliError::file(coefficients, e.to_string()))?;
                let system = ControlAffineSystem::linear("linear", a, b, bounds, DVector::from_column_slice(target))
                    .map_err(config_err)?;
                let ground_truth = file.lqr_problem().map_err(|e| CliError::file(coefficients, e.to_string()))?;
                Ok(SystemSetup { system, ground_truth })
            }
        }
    }

    pub fn rollout_horizon(&self) -> usize {
        self.export.horizon.unwrap_or(self.certify.horizon)
    }
}

fn lqr_preset() -> ExperimentSpec {
    ExperimentSpec {
        name: "lqr".into(),
        seed: 7,
        output_dir: PathBuf::from("out/lqr"),
        system: SystemSpec::Lqr,
        data: DataSource::LqrOptimal { n_points: 120 },
        grid: GridSpec { resolution: vec![11, 11] },
        kernel: KernelSpec { lengthscale: Lengthscale::Isotropic(2.0), signal_variance: 1.0 },
        learner: LearnerConfig { lipschitz_mode: LipschitzMode::Fixed { margin: 0.01 }, ..LearnerConfig::default() },
        certify: CertifySpec { dense_refinement: 4, rollouts: 100, horizon: 500 },
        export: ExportSpec::default(),
    }
}

fn nonlinear_preset() -> ExperimentSpec {
    ExperimentSpec {
        name: "nonlinear2d".into(),
        seed: 3,
        output_dir: PathBuf::from("out/nonlinear2d"),
        system: SystemSpec::Nonlinear2d { target: None },
        data: DataSource::PotentialField(PotentialField {
            starts: vec![vec![-0.3, 1.2], vec![-0.3, 3.0], vec![-0.3, 5.2], vec![3.0, 5.3]],
            steps: 11,
            kappa: 0.5,
            height: 1.0,
            width: 0.3,
            boxes: vec![
                BoxRegion { lower: vec![1.5, 0.0], upper: vec![3.0, 1.5] },
                BoxRegion { lower: vec![3.5, 2.0], upper: vec![4.5, 3.5] },
            ],
        }),
        grid: GridSpec { resolution: vec![10, 10] },
        kernel: KernelSpec { lengthscale: Lengthscale::Isotropic(1.5), signal_variance: 1.0 },
        learner: LearnerConfig {
            lipschitz_mode: LipschitzMode::Fixed { margin: 0.01 },
            margin_eps: 0.01,
            mc_samples: 5,
            mc_sigma: 0.05,
            weighting: LossWeighting::Identity,
            ..LearnerConfig::default()
        },
        certify: CertifySpec { dense_refinement: 4, rollouts: 100, horizon: 1000 },
        export: ExportSpec::default(),
    }
}
