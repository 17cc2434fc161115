//! Subspace distances and estimation / prediction scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::linalg::orthonormality_defect;
use crate::predict::{PredictiveNormal, Z_95};

/// Largest principal angle (radians) between the column spaces of two
/// `k×d` matrices with orthonormal columns.
///
/// Computed as `atan2(σ_max((I − AAᵀ)B), σ_min(AᵀB))`, which keeps full
/// relative accuracy for small angles where `arccos` would not.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.ncols() == 0 {
        return Err(GppcaError::arg(format!(
            "principal angles need equal non-empty shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (m, name) in [(a, "first"), (b, "second")] {
        let defect = orthonormality_defect(m);
        if defect > 1e-8 {
            return Err(GppcaError::arg(format!(
                "{name} matrix does not have orthonormal columns (defect {defect:.3e})"
            )));
        }
    }
    let cross = a.transpose() * b;
    let cos_min = cross
        .singular_values()
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v));
    let resid = b - a * &cross;
    let sin_max = resid
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(*v));
    Ok(sin_max.atan2(cos_min).clamp(0.0, std::f64::consts::FRAC_PI_2))
}

/// Mean squared error between two equally shaped matrices.
pub fn mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(GppcaError::arg(format!(
            "shape mismatch: {:?} vs {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    Ok((estimate - truth).norm_squared() / (truth.len().max(1)) as f64)
}

/// Squared error summed over all experiments, rows and columns, divided by `k·n·N`.
pub fn avg_mse(estimates: &[DMatrix<f64>], truths: &[DMatrix<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(GppcaError::arg(format!(
            "{} estimates for {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let shape = truths[0].shape();
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        if e.shape() != shape || t.shape() != shape {
            return Err(GppcaError::arg("all experiments must share one shape"));
        }
        total += (e - t).norm_squared();
    }
    Ok(total / (shape.0 * shape.1 * truths.len()) as f64)
}

/// Out-of-sample accuracy of point predictions and 95% intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse: f64,
    pub coverage_95: f64,
    pub avg_interval_length: f64,
    pub avg_mse: f64,
    pub largest_angle: Option<f64>,
}

/// Scores interval predictions `[lower, upper]` with point predictions `mean` against `truth`.
pub fn interval_scores(
    mean: &DMatrix<f64>,
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    truth: &DMatrix<f64>,
) -> Result<ScoreReport> {
    let shape = truth.shape();
    if mean.shape() != shape || lower.shape() != shape || upper.shape() != shape {
        return Err(GppcaError::arg("prediction and truth shapes differ"));
    }
    if truth.is_empty() {
        return Err(GppcaError::arg("nothing to score"));
    }
    let m = truth.len() as f64;
    let sq = mse(mean, truth)?;
    let mut inside = 0usize;
    let mut length = 0.0;
    for i in 0..truth.len() {
        if lower[i] <= truth[i] && truth[i] <= upper[i] {
            inside += 1;
        }
        length += (upper[i] - lower[i]).max(0.0);
    }
    Ok(ScoreReport {
        rmse: sq.sqrt(),
        coverage_95: inside as f64 / m,
        avg_interval_length: length / m,
        avg_mse: sq,
        largest_angle: None,
    })
}

/// Scores a list of predictive normals, one per column of the `k×m` `truth`.
pub fn prediction_scores(preds: &[PredictiveNormal], truth: &DMatrix<f64>) -> Result<ScoreReport> {
    if preds.len() != truth.ncols() {
        return Err(GppcaError::arg(format!(
            "{} predictions for {} held-out columns",
            preds.len(),
            truth.ncols()
        )));
    }
    let k = truth.nrows();
    let mut mean = DMatrix::zeros(k, preds.len());
    let mut lower = DMatrix::zeros(k, preds.len());
    let mut upper = DMatrix::zeros(k, preds.len());
    for (j, p) in preds.iter().enumerate() {
        if p.dim() != k {
            return Err(GppcaError::arg("prediction dimension differs from truth"));
        }
        let (lo, hi) = p.interval(Z_95);
        mean.set_column(j, &p.mean);
        lower.set_column(j, &lo);
        upper.set_column(j, &hi);
    }
    interval_scores(&mean, &lower, &upper, truth)
}
