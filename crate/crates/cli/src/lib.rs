//! Experiment runner for learning control Lyapunov functions from
//! demonstrations: presets, data ingestion, certification and plot-data export.

pub mod app;
pub mod demos;
pub mod error;
pub mod matrix_file;
pub mod pipeline;
pub mod spec;
pub mod trajectory_csv;

pub use error::{CliError, CliResult};
pub use spec::ExperimentSpec;
