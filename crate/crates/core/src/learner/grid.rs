use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::BoxBounds;

/// Finite set of states on which the decrease condition is imposed, with its
/// grid constant `ξ = max_x min_i ‖x - x̂_i‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityGrid {
    #[serde(with = "crate::serde_rows")]
    pub points: Vec<DVector<f64>>,
    pub grid_constant: f64,
    /// Margin subtracted from the decrease bound at non-equilibrium points.
    pub tightening: f64,
    pub equilibrium_index: usize,
    /// Lattice description, absent for grids built from explicit points.
    pub lattice: Option<LatticeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl LatticeSpec {
    pub fn spacing(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(&self.resolution)
            .map(|((l, u), r)| (u - l) / (*r as f64 - 1.0))
            .collect()
    }

    /// The lattice refined `factor` times per axis, `(r - 1)·factor + 1` points each.
    pub fn refined(&self, factor: usize) -> LatticeSpec {
        LatticeSpec {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            resolution: self.resolution.iter().map(|r| (r - 1) * factor + 1).collect(),
        }
    }

    /// Points in row-major order (last axis fastest).
    pub fn points(&self) -> Vec<DVector<f64>> {
        lattice_points(&self.lower, &self.upper, &self.resolution)
    }
}

/// Equidistant lattice including the box corners, last axis varying fastest.
pub fn lattice_points(lower: &[f64], upper: &[f64], resolution: &[usize]) -> Vec<DVector<f64>> {
    let dim = lower.len();
    let total: usize = resolution.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        out.push(DVector::from_iterator(
            dim,
            (0..dim).map(|d| {
                if idx[d] + 1 == resolution[d] {
                    upper[d]
                } else {
                    lower[d] + (upper[d] - lower[d]) * idx[d] as f64 / (resolution[d] as f64 - 1.0)
                }
            }),
        ));
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < resolution[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Equidistant lattice over `bounds` with the target snapped to its nearest
/// lattice point. `ξ` is half the cell diagonal.
pub fn build_grid(bounds: &BoxBounds, resolution: &[usize], target: &DVector<f64>) -> Result<StabilityGrid> {
    if resolution.len() != bounds.dim() {
        return Err(Error::DimensionMismatch { expected: bounds.dim(), got: resolution.len() });
    }
    if resolution.iter().any(|r| *r < 2) {
        return Err(Error::InvalidInput(format!("grid resolution must be at least 2 per axis, got {resolution:?}")));
    }
    if target.len() != bounds.dim() {
        return Err(Error::DimensionMismatch { expected: bounds.dim(), got: target.len() });
    }
    let lattice = LatticeSpec {
        lower: bounds.lower().as_slice().to_vec(),
        upper: bounds.upper().as_slice().to_vec(),
        resolution: resolution.to_vec(),
    };
    let grid_constant = 0.5 * lattice.spacing().iter().map(|h| h * h).sum::<f64>().sqrt();
    let points = lattice.points();
    let equilibrium_index = nearest_index(&points, target);
    Ok(StabilityGrid { points, grid_constant, tightening: 0.0, equilibrium_index, lattice: Some(lattice) })
}

fn nearest_index(points: &[DVector<f64>], x: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - x).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

impl StabilityGrid {
    /// Grid from explicit points; `grid_constant` is taken as given.
    pub fn from_points(points: Vec<DVector<f64>>, grid_constant: f64, target: &DVector<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("stability grid needs at least one point".into()));
        }
        if !(grid_constant >= 0.0 && grid_constant.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid grid constant {grid_constant}")));
        }
        let equilibrium_index = nearest_index(&points, target);
        Ok(Self { points, grid_constant, tightening: 0.0, equilibrium_index, lattice: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn equilibrium(&self) -> &DVector<f64> {
        &self.points[self.equilibrium_index]
    }

    pub fn with_tightening(mut self, tightening: f64) -> Self {
        self.tightening = tightening;
        self
    }

    /// Grid points plus cell midpoints (the lattice refined twice); the grid
    /// points themselves for non-lattice grids.
    pub fn refined_samples(&self) -> Vec<DVector<f64>> {
        match &self.lattice {
            Some(l) => l.refined(2).points(),
            None => self.points.clone(),
        }
    }
}
