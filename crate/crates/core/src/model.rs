//! Core data types shared by the estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::kernels::{InputGrid, KernelSpec};
use crate::linalg::orthonormality_defect;

/// Tolerance on `‖AᵀA − I‖_max` for a matrix to count as a Stiefel point.
pub const STIEFEL_TOL: f64 = 1e-10;

/// A `k×n` observation matrix together with the inputs of its columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    values: DMatrix<f64>,
    grid: InputGrid,
}

impl OutputMatrix {
    pub fn new(values: DMatrix<f64>, grid: InputGrid) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(GppcaError::arg("output matrix has no rows"));
        }
        if values.ncols() != grid.len() {
            return Err(GppcaError::arg(format!(
                "output matrix has {} columns but the grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GppcaError::arg("output matrix contains non-finite values"));
        }
        Ok(Self { values, grid })
    }

    /// Uses the regular grid `1, 2, …, n`.
    pub fn on_regular_grid(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(GppcaError::arg("output matrix has no columns"));
        }
        let grid = InputGrid::regular(values.ncols());
        Self::new(values, grid)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn grid(&self) -> &InputGrid {
        &self.grid
    }

    /// Number of outputs `k`.
    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    /// Number of inputs `n`.
    pub fn n(&self) -> usize {
        self.values.ncols()
    }
}

/// A `k×d` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadingMatrix(DMatrix<f64>);

impl LoadingMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (k, d) = values.shape();
        if d > k {
            return Err(GppcaError::arg(format!("loading matrix is {k}x{d} with d > k")));
        }
        let defect = orthonormality_defect(&values);
        if defect.is_nan() || defect > STIEFEL_TOL {
            return Err(GppcaError::arg(format!(
                "loading matrix columns are not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self(values))
    }

    pub(crate) fn new_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }
}

/// Fitted or supplied covariance hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub sigma0_sq: f64,
    /// Signal-to-noise ratios `τ_l = σ_l² / σ₀²`, one per factor.
    pub taus: Vec<f64>,
    pub kernels: Vec<KernelSpec>,
    pub shared_covariance: bool,
    pub fixed_noise: Option<f64>,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.taus.len();
        if self.kernels.len() != d {
            return Err(GppcaError::arg(format!(
                "{} kernels supplied for {d} factors",
                self.kernels.len()
            )));
        }
        if !(self.sigma0_sq >= 0.0 && self.sigma0_sq.is_finite()) {
            return Err(GppcaError::arg(format!("invalid noise variance {}", self.sigma0_sq)));
        }
        if let Some(&t) = self.taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(GppcaError::arg(format!("invalid signal-to-noise ratio {t}")));
        }
        for spec in &self.kernels {
            spec.validate()?;
        }
        if self.shared_covariance
            && (self.taus.windows(2).any(|w| w[0] != w[1])
                || self.kernels.windows(2).any(|w| w[0] != w[1]))
        {
            return Err(GppcaError::arg(
                "shared covariance requires identical kernels and signal-to-noise ratios",
            ));
        }
        Ok(())
    }

    /// Factor variances `σ_l² = τ_l σ₀²`.
    pub fn factor_variances(&self) -> Vec<f64> {
        self.taus.iter().map(|t| t * self.sigma0_sq).collect()
    }
}
