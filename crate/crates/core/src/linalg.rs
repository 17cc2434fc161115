//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{GppcaError, Result};

/// Maximum number of jitter doublings attempted before giving up.
const MAX_JITTER_DOUBLINGS: usize = 10;

/// Cholesky factor of a symmetric positive definite matrix, with the
/// diagonal jitter (possibly zero) that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl JitteredCholesky {
    /// Factorizes `m`, adding `1e-10 * trace/n` to the diagonal (doubled up to
    /// ten times) when the plain factorization fails.
    pub fn factor(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(GppcaError::arg(format!(
                "cannot factor a non-square {}x{} matrix",
                n,
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GppcaError::numeric("matrix to factor has non-finite entries"));
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = 1e-10 * scale;
        for _ in 0..=MAX_JITTER_DOUBLINGS {
            let mut shifted = m.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter });
            }
            jitter *= 2.0;
        }
        Err(GppcaError::numeric(format!(
            "Cholesky factorization failed for a {n}x{n} matrix even with diagonal jitter {:.3e}; \
             the covariance is numerically singular (try a smaller range parameter or remove duplicate inputs)",
            jitter / 2.0
        )))
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Natural log of the determinant of the (jittered) matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// The lower-triangular factor `L` with `L Lᵀ` equal to the jittered matrix.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Flips column signs so the largest-magnitude entry of every column is positive.
pub fn normalize_column_signs(a: &mut DMatrix<f64>) {
    for mut col in a.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Leading `d` eigenpairs of a symmetric matrix, eigenvalues in descending
/// order and eigenvector signs normalized.
pub fn top_eigenpairs(sym: &DMatrix<f64>, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let k = sym.nrows();
    if d > k {
        return Err(GppcaError::arg(format!(
            "requested {d} eigenvectors of a {k}x{k} matrix"
        )));
    }
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(GppcaError::numeric("eigen-solver input has non-finite entries"));
    }
    let mut s = sym.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 0)
        .ok_or_else(|| GppcaError::numeric("symmetric eigen-solver did not converge"))?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(k, d);
    let mut vals = Vec::with_capacity(d);
    for (c, &idx) in order.iter().take(d).enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(idx));
        vals.push(eig.eigenvalues[idx]);
    }
    normalize_column_signs(&mut vecs);
    Ok((vecs, vals))
}

/// All eigenvalues of a symmetric matrix in descending order.
pub fn sorted_eigenvalues(sym: &DMatrix<f64>) -> Vec<f64> {
    let mut s = sym.clone();
    symmetrize(&mut s);
    let mut vals: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// `max |AᵀA − I|` over all entries.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    let d = gram.nrows();
    let mut worst = 0.0_f64;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Thin-QR orthonormal basis of the column space of `a`, with the sign
/// convention that `R` has a non-negative diagonal.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols();
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Inverts a small general matrix through LU; used for the low-rank Cayley
/// solves and oracle computations.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().lu().solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_rank_deficient_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let chol = JitteredCholesky::factor(&m).unwrap();
        assert!(chol.jitter() > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_a_numeric_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            JitteredCholesky::factor(&m),
            Err(GppcaError::Numeric(_))
        ));
    }

    #[test]
    fn log_det_matches_product_of_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let chol = JitteredCholesky::factor(&m).unwrap();
        assert!((chol.log_det() - 36.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn top_eigenpairs_are_sorted_and_sign_fixed() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vecs, vals) = top_eigenpairs(&m, 2).unwrap();
        assert_eq!(vals, vec![5.0, 3.0]);
        assert!((vecs[(1, 0)] - 1.0).abs() < 1e-14);
        assert!((vecs[(2, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthonormalize_spans_input() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let q = orthonormalize(&a);
        assert!(orthonormality_defect(&q) < 1e-14);
        assert!((q[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((q[(1, 1)] - 1.0).abs() < 1e-14);
    }
}
