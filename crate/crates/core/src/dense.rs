//! Dense `nk×nk` forms of the joint distribution of `vec(Y)`.
//!
//! These are reference implementations for small problems only; the
//! estimators never build them. `vec` stacks columns, so entry `(j, i)` of a
//! `k×n` matrix sits at position `i·k + j`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GppcaError, Result};
use crate::linalg::JitteredCholesky;

/// Largest `nk` accepted by the dense routines.
pub const MAX_DENSE_DIM: usize = 2000;

fn check_inputs(a: &DMatrix<f64>, sigmas: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    let (k, d) = a.shape();
    if sigmas.len() != d {
        return Err(GppcaError::arg(format!(
            "{} covariance matrices supplied for {d} loading columns",
            sigmas.len()
        )));
    }
    let n = match sigmas.first() {
        Some(s) => s.nrows(),
        None => {
            return Err(GppcaError::arg(
                "cannot infer n without covariance matrices; use the sized variant",
            ))
        }
    };
    if sigmas.iter().any(|s| s.shape() != (n, n)) {
        return Err(GppcaError::arg("factor covariance matrices must all be n×n"));
    }
    if n * k > MAX_DENSE_DIM {
        return Err(GppcaError::arg(format!(
            "dense joint matrix would be {0}x{0}; refusing above {MAX_DENSE_DIM}",
            n * k
        )));
    }
    Ok((k, n))
}

/// Adds `Σ ⊗ (a aᵀ)` into `out`.
fn add_kron(out: &mut DMatrix<f64>, sigma: &DMatrix<f64>, a: &DMatrix<f64>, l: usize, scale: f64) {
    let k = a.nrows();
    let n = sigma.nrows();
    for i in 0..n {
        for ip in 0..n {
            let s = sigma[(i, ip)] * scale;
            if s == 0.0 {
                continue;
            }
            for j in 0..k {
                let aj = a[(j, l)] * s;
                for jp in 0..k {
                    out[(i * k + j, ip * k + jp)] += aj * a[(jp, l)];
                }
            }
        }
    }
}

/// `Σ_l Σ_l ⊗ (a_l a_lᵀ) + σ₀² I_{nk}`.
pub fn joint_covariance_direct(
    a: &DMatrix<f64>,
    sigmas: &[DMatrix<f64>],
    sigma0_sq: f64,
) -> Result<DMatrix<f64>> {
    let (k, n) = check_inputs(a, sigmas)?;
    let mut out = DMatrix::identity(n * k, n * k) * sigma0_sq;
    for (l, s) in sigmas.iter().enumerate() {
        add_kron(&mut out, s, a, l, 1.0);
    }
    Ok(out)
}

/// `σ₀⁻²(I_{nk} − Σ_l (σ₀² Σ_l⁻¹ + I_n)⁻¹ ⊗ (a_l a_lᵀ))`, valid for orthonormal `A`.
pub fn joint_precision_closed_form(
    a: &DMatrix<f64>,
    sigmas: &[DMatrix<f64>],
    sigma0_sq: f64,
) -> Result<DMatrix<f64>> {
    if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
        return Err(GppcaError::arg(format!(
            "closed-form precision needs σ₀² > 0, got {sigma0_sq}"
        )));
    }
    let (k, n) = check_inputs(a, sigmas)?;
    let mut out = DMatrix::identity(n * k, n * k);
    for (l, s) in sigmas.iter().enumerate() {
        // (σ₀² Σ⁻¹ + I)⁻¹ = Σ (Σ + σ₀² I)⁻¹
        let mut shifted = s.clone();
        for i in 0..n {
            shifted[(i, i)] += sigma0_sq;
        }
        let chol = JitteredCholesky::factor(&shifted)?;
        let inner = chol.solve(s).transpose();
        add_kron(&mut out, &inner, a, l, -1.0);
    }
    Ok(out / sigma0_sq)
}

/// `σ₀⁻² I_{nk}`: the closed-form precision with no factors.
pub fn joint_precision_no_factors(k: usize, n: usize, sigma0_sq: f64) -> DMatrix<f64> {
    DMatrix::identity(n * k, n * k) / sigma0_sq
}

/// Zero-mean Gaussian log-density `log N(y; 0, C)`, including `−(m/2) log 2π`.
pub fn gaussian_log_density(cov: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let m = y.len();
    if cov.shape() != (m, m) {
        return Err(GppcaError::arg("covariance and vector sizes differ"));
    }
    let chol = JitteredCholesky::factor(cov)?;
    let quad = y.dot(&chol.solve_vec(y));
    Ok(-0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol.log_det() - 0.5 * quad)
}

/// `[I_n ⊗ a_1, …, I_n ⊗ a_d]`, mapping the stacked factor vector
/// `(Z_1ᵀ; …; Z_dᵀ)` onto `vec(A Z)`.
pub fn stacked_loading_operator(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (k, d) = a.shape();
    let mut out = DMatrix::zeros(n * k, n * d);
    for l in 0..d {
        for i in 0..n {
            for j in 0..k {
                out[(i * k + j, l * n + i)] = a[(j, l)];
            }
        }
    }
    out
}

/// Column-stacked `vec(Y)`.
pub fn vec_columns(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(y.as_slice())
}
