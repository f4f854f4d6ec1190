//! JSON coefficient files for linear systems and LQR problems. Matrices are
//! lists of rows.

use std::path::Path;

use clf_irl::lqr::{DareSolution, LqrProblem};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q", default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default)]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err("empty matrix".into());
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("matrix rows have different lengths".into());
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl CoefficientFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::file(path, e.to_string()))
    }

    pub fn from_problem(p: &LqrProblem) -> Self {
        Self {
            a: matrix_to_rows(&p.a),
            b: matrix_to_rows(&p.b),
            q: Some(matrix_to_rows(&p.q)),
            r: Some(matrix_to_rows(&p.r)),
            gamma: Some(p.gamma),
        }
    }

    pub fn dynamics(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), String> {
        Ok((matrix_from_rows(&self.a)?, matrix_from_rows(&self.b)?))
    }

    /// The LQR problem, when both cost matrices are given.
    pub fn lqr_problem(&self) -> Result<Option<LqrProblem>, String> {
        let (Some(q), Some(r)) = (&self.q, &self.r) else {
            return Ok(None);
        };
        let (a, b) = self.dynamics()?;
        LqrProblem::new(a, b, matrix_from_rows(q)?, matrix_from_rows(r)?, self.gamma.unwrap_or(1.0))
            .map(Some)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DareReport {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    pub closed_loop_spectral_radius: f64,
}

impl DareReport {
    pub fn new(problem: &LqrProblem, solution: &DareSolution) -> Self {
        Self {
            p: matrix_to_rows(&solution.p),
            k: matrix_to_rows(&solution.k),
            iterations: solution.iterations,
            residual: problem.residual(&solution.p),
            closed_loop_spectral_radius: solution.closed_loop_spectral_radius,
        }
    }
}
