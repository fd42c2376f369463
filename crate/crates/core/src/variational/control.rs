//! Piecewise-constant controls on the solver grid.

use crate::error::{Error, Result};
use crate::vecops;

/// Control h: piecewise constant on a uniform grid, one d-vector per step.
/// Piecewise-constant is the minimal discretization consistent with Euler
/// integration and keeps the energy integral exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    dim: usize,
    dt: f64,
    /// steps x dim, row-major.
    values: Vec<f64>,
}

impl ControlGrid {
    pub fn new(dim: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "dimension must be positive".into(),
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: "step must be positive and finite".into(),
            });
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!("length {} is not a positive multiple of {dim}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: "controls must be finite".into(),
            });
        }
        Ok(ControlGrid { dim, dt, values })
    }

    pub fn zero(dim: usize, dt: f64, steps: usize) -> Result<Self> {
        ControlGrid::new(dim, dt, vec![0.0; steps * dim])
    }

    pub fn constant(dim: usize, dt: f64, steps: usize, v: &[f64]) -> Result<Self> {
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
        ControlGrid::new(dim, dt, v.repeat(steps))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn value(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Energy 1/2 sum |h_k|^2 dt; exact for piecewise-constant controls.
    pub fn energy(&self) -> f64 {
        let steps = self.steps();
        0.5 * self.dt
            * vecops::pairwise_sum_by(0, steps, &|k| {
                vecops::norm_sq(self.value(k))
            })
    }

    /// Uniform scaling of all values, used for energy-budget projections.
    pub fn scaled(&self, factor: f64) -> ControlGrid {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= factor;
        }
        out
    }

    /// Errors unless the control matches the given grid geometry.
    pub fn check_grid(&self, dim: usize, dt: f64, steps: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: self.dim,
            });
        }
        if self.steps() != steps || (self.dt - dt).abs() > 1e-12 * dt.max(self.dt) {
            return Err(Error::Grid(format!(
                "control grid ({} steps, dt {}) does not match solver grid ({steps} steps, dt {dt})",
                self.steps(),
                self.dt
            )));
        }
        Ok(())
    }
}
