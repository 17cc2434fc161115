//! Classical loading estimators used for comparison.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::linalg::{sorted_eigenvalues, symmetrize, top_eigenpairs};
use crate::model::LoadingMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodTag {
    Pca,
    Ppca,
    Gppca,
    Ly,
}

/// Estimated loadings with the estimator that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceEstimate {
    pub loadings: LoadingMatrix,
    pub method: MethodTag,
    /// Noise variance, for estimators that produce one.
    pub noise_variance: Option<f64>,
}

fn check_d(y: &DMatrix<f64>, d: usize, strict: bool) -> Result<()> {
    let (k, n) = y.shape();
    let limit = k.min(n);
    let ok = d >= 1 && if strict { d < limit } else { d <= limit };
    if ok {
        Ok(())
    } else {
        Err(GppcaError::arg(format!(
            "d = {d} is out of range for a {k}x{n} output matrix"
        )))
    }
}

fn gram(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = y * y.transpose();
    symmetrize(&mut g);
    g
}

/// Leading `d` eigenvectors of `YYᵀ`.
pub fn pca_loadings(y: &DMatrix<f64>, d: usize) -> Result<SubspaceEstimate> {
    check_d(y, d, false)?;
    let (u, _) = top_eigenpairs(&gram(y), d)?;
    Ok(SubspaceEstimate {
        loadings: LoadingMatrix::new_unchecked(u),
        method: MethodTag::Pca,
        noise_variance: None,
    })
}

/// Probabilistic PCA. The loadings span the PCA subspace; the noise variance
/// is the mean of the trailing `k − d` eigenvalues of `YYᵀ/n`.
pub fn ppca_loadings(y: &DMatrix<f64>, d: usize) -> Result<SubspaceEstimate> {
    check_d(y, d, true)?;
    let g = gram(y);
    let (u, _) = top_eigenpairs(&g, d)?;
    let n = y.ncols() as f64;
    let vals = sorted_eigenvalues(&g);
    let trailing = &vals[d..];
    let sigma0_sq = (trailing.iter().sum::<f64>() / (trailing.len() as f64 * n)).max(0.0);
    Ok(SubspaceEstimate {
        loadings: LoadingMatrix::new_unchecked(u),
        method: MethodTag::Ppca,
        noise_variance: Some(sigma0_sq),
    })
}

/// Lag-`q` sample covariance `(1/n) Σ_t y_{t+q} y_tᵀ` of the columns of `Y`.
pub fn lag_covariance(y: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let n = y.ncols();
    if q >= n {
        return Err(GppcaError::arg(format!("lag {q} needs more than {n} columns")));
    }
    let ahead = y.columns(q, n - q);
    let behind = y.columns(0, n - q);
    Ok(ahead * behind.transpose() / n as f64)
}

/// Lag-covariance estimator: leading `d` eigenvectors of
/// `Σ_{q=1..q0} Σ̂_y(q) Σ̂_y(q)ᵀ`.
pub fn ly_loadings(y: &DMatrix<f64>, d: usize, q0: usize) -> Result<SubspaceEstimate> {
    check_d(y, d, false)?;
    if q0 == 0 {
        return Err(GppcaError::arg("the number of lags must be at least 1"));
    }
    let k = y.nrows();
    let mut m = DMatrix::zeros(k, k);
    for q in 1..=q0 {
        let s = lag_covariance(y, q)?;
        m += &s * s.transpose();
    }
    symmetrize(&mut m);
    let (u, _) = top_eigenpairs(&m, d)?;
    Ok(SubspaceEstimate {
        loadings: LoadingMatrix::new_unchecked(u),
        method: MethodTag::Ly,
        noise_variance: None,
    })
}
