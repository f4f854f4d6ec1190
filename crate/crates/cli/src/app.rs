//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use clf_irl::lqr::{solve_dare, LqrProblem};

use crate::error::{CliError, CliResult};
use crate::matrix_file::{CoefficientFile, DareReport};
use crate::pipeline::{self, CERT_FILE};
use crate::spec::{DataSource, ExperimentSpec};
use crate::trajectory_csv::ingest_trajectories;

#[derive(Debug, Parser)]
#[command(name = "clf-irl", version, about = "Learn and certify control Lyapunov functions from demonstrations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SpecSource {
    /// Built-in experiment: lqr or nonlinear2d.
    #[arg(long)]
    pub preset: Option<String>,
    /// Experiment file (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SpecSource {
    pub fn load(&self) -> CliResult<ExperimentSpec> {
        match (&self.preset, &self.config) {
            (Some(name), _) => ExperimentSpec::preset(name),
            (None, Some(path)) => ExperimentSpec::load(path),
            (None, None) => Err(CliError::Config("either --preset or --config is required".into())),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or ingest data, learn, certify and export.
    Run {
        #[command(flatten)]
        source: SpecSource,
        /// Use demonstrations from this trajectory CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a trajectory CSV for the experiment's system.
    IngestCheck {
        #[command(flatten)]
        source: SpecSource,
        #[arg(long)]
        data: PathBuf,
    },
    /// Re-run the audits of a saved model.
    Certify {
        #[command(flatten)]
        source: SpecSource,
        #[arg(long)]
        model: PathBuf,
        /// Directory for the report; defaults to the model's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot data for a saved model.
    Export {
        #[command(flatten)]
        source: SpecSource,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Points per axis of the plot grids.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Solve the discrete algebraic Riccati equation and print P and K.
    Dare {
        /// JSON file with A, B, Q, R (and optionally gamma); the benchmark problem when absent.
        #[arg(long)]
        problem: Option<PathBuf>,
    },
    /// Print a preset as an experiment file.
    Preset { name: String },
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { source, data, out, seed } => {
            let mut spec = source.load()?;
            if let Some(path) = data {
                spec.data = DataSource::File { path };
            }
            if let Some(out) = out {
                spec.output_dir = out;
            }
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let outcome = pipeline::run_experiment(&spec)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
            println!("artifacts written to {}", outcome.output_dir.display());
            Ok(())
        }
        Command::IngestCheck { source, data } => {
            let spec = source.load()?;
            let setup = spec.build_system()?;
            let trajectories = ingest_trajectories(&data, &setup.system)?;
            let transitions: usize = trajectories.iter().map(|t| t.horizon()).sum();
            println!("{} trajectories, {} transitions", trajectories.len(), transitions);
            for t in &trajectories {
                println!("  {}: {} states", t.id, t.states.len());
            }
            Ok(())
        }
        Command::Certify { source, model, out } => {
            let spec = source.load()?;
            let setup = spec.build_system()?;
            let mut learned = pipeline::read_model(&model)?;
            let report = pipeline::certify(&spec, &setup.system, &mut learned)?;
            let dir = out.unwrap_or_else(|| model.parent().map(PathBuf::from).unwrap_or_default());
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let path = dir.join(CERT_FILE);
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
            let failed = pipeline::failures(&report);
            if failed.is_empty() {
                println!("certification passed; report written to {}", path.display());
                Ok(())
            } else {
                Err(CliError::Certification(failed.join("; ")))
            }
        }
        Command::Export { source, model, out, resolution } => {
            let mut spec = source.load()?;
            if let Some(r) = resolution {
                spec.export.resolution = r;
            }
            if spec.export.resolution < 2 {
                return Err(CliError::Config("resolution must be at least 2".into()));
            }
            let setup = spec.build_system()?;
            let learned = pipeline::read_model(&model)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            let files = pipeline::export_plotdata(&spec, &setup, &learned, &out)?;
            println!("wrote {} to {}", files.join(", "), out.display());
            Ok(())
        }
        Command::Dare { problem } => {
            let problem = match problem {
                Some(path) => CoefficientFile::load(&path)?
                    .lqr_problem()
                    .map_err(|e| CliError::file(&path, e))?
                    .ok_or_else(|| CliError::file(&path, "Q and R are required"))?,
                None => LqrProblem::benchmark(),
            };
            let solution = solve_dare(&problem).map_err(|e| CliError::Config(e.to_string()))?;
            let report = DareReport::new(&problem, &solution);
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Preset { name } => {
            let spec = ExperimentSpec::preset(&name)?;
            print!("{}", spec.to_toml()?);
            Ok(())
        }
    }
}
