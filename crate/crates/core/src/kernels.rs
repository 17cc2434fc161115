//! Stationary correlation kernels and the correlation matrices they induce.
//!
//! Multi-dimensional inputs use a separable product of one-dimensional
//! kernels, one range parameter per coordinate. Roughness is fixed by the
//! family: exponential (Matérn ν = 1/2), Matérn ν = 5/2, and the Gaussian
//! (ν → ∞) limit.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};

const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    #[default]
    #[serde(rename = "matern_5_2")]
    Matern52,
    #[serde(rename = "exponential")]
    Exponential,
    #[serde(rename = "gaussian")]
    Gaussian,
}

impl KernelFamily {
    /// One-dimensional correlation at absolute distance `dist` and range `range`.
    pub fn correlation(self, dist: f64, range: f64) -> f64 {
        let r = dist.abs() / range;
        match self {
            KernelFamily::Matern52 => {
                let s = SQRT_5 * r;
                (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
            }
            KernelFamily::Exponential => (-r).exp(),
            KernelFamily::Gaussian => (-r * r).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Matern52 => "matern_5_2",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = GppcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matern_5_2" => Ok(KernelFamily::Matern52),
            "exponential" => Ok(KernelFamily::Exponential),
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => Err(GppcaError::arg(format!(
                "unknown kernel family {other:?} (expected matern_5_2, exponential or gaussian)"
            ))),
        }
    }
}

/// A kernel family together with one positive range parameter per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub ranges: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, ranges: Vec<f64>) -> Result<Self> {
        let spec = Self { family, ranges };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(GppcaError::arg("kernel needs at least one range parameter"));
        }
        if let Some(bad) = self.ranges.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(GppcaError::arg(format!(
                "kernel range parameters must be positive and finite, got {bad}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    /// Product-kernel correlation between two inputs.
    pub fn eval(&self, xa: &[f64], xb: &[f64]) -> Result<f64> {
        self.validate()?;
        if xa.len() != self.dim() || xb.len() != self.dim() {
            return Err(GppcaError::arg(format!(
                "input dimension mismatch: kernel has {} ranges, inputs have {} and {} coordinates",
                self.dim(),
                xa.len(),
                xb.len()
            )));
        }
        Ok(self.eval_unchecked(xa, xb))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, xa: &[f64], xb: &[f64]) -> f64 {
        xa.iter()
            .zip(xb)
            .zip(&self.ranges)
            .map(|((a, b), g)| self.family.correlation(a - b, *g))
            .product()
    }
}

/// Free function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, xa: &[f64], xb: &[f64]) -> Result<f64> {
    spec.eval(xa, xb)
}

/// Ordered input locations `x_1, ..., x_n`, all of the same dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputGrid {
    points: Vec<Vec<f64>>,
}

impl InputGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(GppcaError::arg("input grid is empty"));
        };
        let p = first.len();
        if p == 0 {
            return Err(GppcaError::arg("input points must have at least one coordinate"));
        }
        if let Some((i, _)) = points.iter().enumerate().find(|(_, x)| x.len() != p) {
            return Err(GppcaError::arg(format!(
                "input point {i} has a different dimension than point 0 ({p})"
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GppcaError::arg("input points must be finite"));
        }
        Ok(Self { points })
    }

    /// The one-dimensional grid `1, 2, ..., n`.
    pub fn regular(n: usize) -> Self {
        Self {
            points: (1..=n).map(|i| vec![i as f64]).collect(),
        }
    }

    pub fn from_values(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Per-coordinate extent `max − min`.
    pub fn diameters(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|m| {
                let (lo, hi) = self
                    .points
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                        (lo.min(x[m]), hi.max(x[m]))
                    });
                hi - lo
            })
            .collect()
    }

    /// Sub-grid at the given indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }
}

/// The `n×n` correlation matrix `K` with `K[i,j] = k(x_i, x_j)`.
pub fn build_correlation_matrix(spec: &KernelSpec, grid: &InputGrid) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if grid.dim() != spec.dim() {
        return Err(GppcaError::arg(format!(
            "kernel has {} ranges but inputs are {}-dimensional",
            spec.dim(),
            grid.dim()
        )));
    }
    let n = grid.len();
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = spec.eval_unchecked(grid.point(i), grid.point(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Correlations `(k(x_1, x*), ..., k(x_n, x*))ᵀ` between the grid and one new input.
pub fn cross_correlation(spec: &KernelSpec, grid: &InputGrid, xstar: &[f64]) -> Result<DVector<f64>> {
    if xstar.len() != spec.dim() || grid.dim() != spec.dim() {
        return Err(GppcaError::arg(format!(
            "prediction input has {} coordinates, model expects {}",
            xstar.len(),
            spec.dim()
        )));
    }
    Ok(DVector::from_iterator(
        grid.len(),
        grid.points().iter().map(|x| spec.eval_unchecked(x, xstar)),
    ))
}
