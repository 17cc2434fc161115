//! Marginal-likelihood building blocks.
//!
//! Everything is expressed through `C_l = τ_l K_l + I`, which is always
//! well conditioned (eigenvalues ≥ 1), so no inverse of `K_l` is formed.
//! With a mean design `H` the relevant operator is the projector
//! `P_l = C⁻¹ − C⁻¹H(HᵀC⁻¹H)⁻¹HᵀC⁻¹`, which reduces to `C⁻¹` when `q = 0`.
//! The quadratic-form matrix of the loading objective is then
//! `G_l = Y M Yᵀ − Y P_l Yᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GppcaError, Result};
use crate::kernels::{build_correlation_matrix, InputGrid, KernelSpec};
use crate::linalg::{symmetrize, top_eigenpairs, JitteredCholesky};
use crate::mean::MeanDesign;
use crate::model::{LoadingMatrix, OutputMatrix};
use crate::stiefel::{optimize_multi_start, StiefelOptions, StiefelReport};

/// Factorizations for one factor at fixed `(τ, γ)`.
#[derive(Clone, Debug)]
pub(crate) struct FactorSystem {
    pub tau: f64,
    pub corr: DMatrix<f64>,
    /// Cholesky factor of `τK + I`.
    pub chol: JitteredCholesky,
    /// `C⁻¹H`, `n×q`.
    cinv_h: DMatrix<f64>,
    /// Cholesky factor of `HᵀC⁻¹H` when `q > 0`.
    gls: Option<JitteredCholesky>,
}

impl FactorSystem {
    pub fn new(spec: &KernelSpec, tau: f64, grid: &InputGrid, design: &MeanDesign) -> Result<Self> {
        let corr = build_correlation_matrix(spec, grid)?;
        Self::from_correlation(corr, tau, design)
    }

    pub fn from_correlation(corr: DMatrix<f64>, tau: f64, design: &MeanDesign) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(GppcaError::arg(format!("signal-to-noise ratio must be ≥ 0, got {tau}")));
        }
        let n = corr.nrows();
        if corr.ncols() != n || design.n() != n {
            return Err(GppcaError::arg(format!(
                "correlation matrix is {}x{} but the design has {} rows",
                n,
                corr.ncols(),
                design.n()
            )));
        }
        let mut c = &corr * tau;
        for i in 0..n {
            c[(i, i)] += 1.0;
        }
        let chol = JitteredCholesky::factor(&c).map_err(|e| {
            GppcaError::numeric(format!("factorizing τK + I at τ = {tau:.6e}: {e}"))
        })?;
        let (cinv_h, gls) = if design.q() == 0 {
            (DMatrix::zeros(n, 0), None)
        } else {
            let cinv_h = chol.solve(design.h());
            let mut hc = design.h().transpose() * &cinv_h;
            symmetrize(&mut hc);
            (cinv_h, Some(JitteredCholesky::factor(&hc)?))
        };
        Ok(Self {
            tau,
            corr,
            chol,
            cinv_h,
            gls,
        })
    }

    /// `log|τK + I| + log|HᵀC⁻¹H|`.
    pub fn log_det(&self) -> f64 {
        self.chol.log_det() + self.gls.as_ref().map_or(0.0, |g| g.log_det())
    }

    /// `P B` for an `n×m` matrix `B`.
    pub fn apply_p(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.chol.solve(b);
        match &self.gls {
            None => x,
            Some(g) => {
                let coef = g.solve(&(self.cinv_h.transpose() * b));
                x - &self.cinv_h * coef
            }
        }
    }

    pub fn apply_p_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = self.chol.solve_vec(v);
        match &self.gls {
            None => x,
            Some(g) => {
                let coef = g.solve_vec(&(self.cinv_h.transpose() * v));
                x - &self.cinv_h * coef
            }
        }
    }

    pub fn gls(&self) -> Option<&JitteredCholesky> {
        self.gls.as_ref()
    }

    pub fn cinv_h(&self) -> &DMatrix<f64> {
        &self.cinv_h
    }
}

/// Data-dependent quantities reused across likelihood evaluations.
pub(crate) struct Workspace {
    /// `Y M`.
    ym: DMatrix<f64>,
    /// `Y M Yᵀ`.
    ymyt: DMatrix<f64>,
    trace: f64,
    dof: f64,
}

impl Workspace {
    pub fn new(y: &DMatrix<f64>, design: &MeanDesign) -> Result<Self> {
        let (k, n) = y.shape();
        if design.n() != n {
            return Err(GppcaError::arg(format!(
                "mean design has {} rows but the data has {n} columns",
                design.n()
            )));
        }
        let ym = design.residualize(y);
        let mut ymyt = &ym * y.transpose();
        symmetrize(&mut ymyt);
        let trace = ymyt.trace();
        let dof = (k * (n - design.q())) as f64;
        Ok(Self {
            ym,
            ymyt,
            trace,
            dof,
        })
    }

    /// `tr(Y M Yᵀ)`.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// `k (n − q)`.
    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn g_matrix(&self, sys: &FactorSystem) -> DMatrix<f64> {
        let pyt = sys.apply_p(&self.ym.transpose());
        let mut g = &self.ymyt - &self.ym * pyt;
        symmetrize(&mut g);
        g
    }

    /// `aᵀ G a` without forming `G`.
    pub fn quad(&self, sys: &FactorSystem, a: &DVector<f64>) -> f64 {
        let v = self.ym.transpose() * a;
        let outer = a.dot(&(&self.ymyt * a));
        outer - v.dot(&sys.apply_p_vec(&v))
    }

    /// `Ŝ² = tr(YMYᵀ) − Σ a_lᵀ G_l a_l`, clamped at zero after a rounding check.
    pub fn residual(&self, quad_total: f64) -> Result<f64> {
        let s2 = self.trace - quad_total;
        if !s2.is_finite() {
            return Err(GppcaError::numeric("residual sum of squares is not finite"));
        }
        if s2 < -1e-10 * self.trace.max(f64::MIN_POSITIVE) {
            return Err(GppcaError::numeric(format!(
                "residual sum of squares is negative ({s2:.6e}) beyond rounding"
            )));
        }
        Ok(s2.max(0.0))
    }

    /// Log-likelihood up to constants, either with `σ₀²` profiled out or fixed.
    pub fn log_likelihood(&self, log_det_total: f64, s2: f64, fixed_noise: Option<f64>) -> f64 {
        match fixed_noise {
            None => -0.5 * log_det_total - 0.5 * self.dof * s2.ln(),
            Some(s0) => -0.5 * log_det_total - 0.5 * self.dof * s0.ln() - s2 / (2.0 * s0),
        }
    }

    /// Leading eigenvectors of `Y M Yᵀ`.
    pub fn pca_start(&self, d: usize) -> Result<DMatrix<f64>> {
        Ok(top_eigenpairs(&self.ymyt, d)?.0)
    }
}

/// Maximizes `Σ_l a_lᵀ G_l a_l`: by eigen-decomposition when `shared`, by
/// multi-start curvilinear search otherwise.
pub(crate) fn solve_loadings(
    gs: &[DMatrix<f64>],
    shared: bool,
    d: usize,
    starts: &[DMatrix<f64>],
    opts: &StiefelOptions,
) -> Result<(DMatrix<f64>, Option<StiefelReport>)> {
    if shared {
        return Ok((top_eigenpairs(&gs[0], d)?.0, None));
    }
    let (a, rep) = optimize_multi_start(
        |a| objective_and_gradient(a, gs),
        starts,
        opts,
    )?;
    Ok((a, Some(rep)))
}

fn objective_and_gradient(a: &DMatrix<f64>, gs: &[DMatrix<f64>]) -> (f64, DMatrix<f64>) {
    let mut f = 0.0;
    let mut grad = DMatrix::zeros(a.nrows(), a.ncols());
    for (l, g) in gs.iter().enumerate() {
        let ga = g * a.column(l);
        f += a.column(l).dot(&ga);
        grad.set_column(l, &(ga * 2.0));
    }
    (f, grad)
}

fn check_g_list(a: &DMatrix<f64>, gs: &[DMatrix<f64>]) -> Result<()> {
    let (k, d) = a.shape();
    if gs.len() != d {
        return Err(GppcaError::arg(format!("expected {d} G matrices, got {}", gs.len())));
    }
    if let Some(g) = gs.iter().find(|g| g.shape() != (k, k)) {
        return Err(GppcaError::arg(format!(
            "G matrices must be {k}x{k}, got {}x{}",
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(())
}

/// `F(A) = Σ_l a_lᵀ G_l a_l`.
pub fn stiefel_objective(a: &DMatrix<f64>, gs: &[DMatrix<f64>]) -> Result<f64> {
    check_g_list(a, gs)?;
    Ok(objective_and_gradient(a, gs).0)
}

/// Euclidean gradient of [`stiefel_objective`]: column `l` is `2 G_l a_l`.
pub fn stiefel_gradient(a: &DMatrix<f64>, gs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    check_g_list(a, gs)?;
    Ok(objective_and_gradient(a, gs).1)
}

/// `G = Y((τK)⁻¹ + I)⁻¹Yᵀ`, evaluated as `YYᵀ − Y(τK + I)⁻¹Yᵀ`.
pub fn g_matrix(y: &DMatrix<f64>, corr: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let design = MeanDesign::none(y.ncols());
    let ws = Workspace::new(y, &design)?;
    let sys = FactorSystem::from_correlation(corr.clone(), tau, &design)?;
    Ok(ws.g_matrix(&sys))
}

/// Closed-form loadings for a covariance shared by all factors: the leading
/// `d` eigenvectors of [`g_matrix`], with column signs fixed.
pub fn estimate_loadings_shared(
    y: &DMatrix<f64>,
    corr: &DMatrix<f64>,
    tau: f64,
    d: usize,
) -> Result<LoadingMatrix> {
    if d == 0 || d > y.nrows() {
        return Err(GppcaError::arg(format!(
            "number of factors must be in 1..={}, got {d}",
            y.nrows()
        )));
    }
    let g = g_matrix(y, corr, tau)?;
    Ok(LoadingMatrix::new_unchecked(top_eigenpairs(&g, d)?.0))
}

/// `σ̂₀² = Ŝ²/(nk)` for given loadings and per-factor `(K_l, τ_l)`.
///
/// `corrs` and `taus` hold either one entry per factor or a single shared entry.
pub fn estimate_noise_variance(
    y: &DMatrix<f64>,
    a: &LoadingMatrix,
    corrs: &[DMatrix<f64>],
    taus: &[f64],
) -> Result<f64> {
    crate::mean::noise_variance_mean(y, a, corrs, taus, &MeanDesign::none(y.ncols()))
}

/// Builds one system per distinct block: a single one when `shared`.
pub(crate) fn build_systems(
    data: &OutputMatrix,
    taus: &[f64],
    specs: &[KernelSpec],
    design: &MeanDesign,
) -> Result<Vec<FactorSystem>> {
    taus.iter()
        .zip(specs)
        .map(|(&tau, spec)| FactorSystem::new(spec, tau, data.grid(), design))
        .collect()
}
