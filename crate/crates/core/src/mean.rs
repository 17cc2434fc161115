//! Regression mean structure `Y = (H B)ᵀ + A Z + ε` with a flat prior on `B`.
//!
//! A `q = 0` design means "no mean": the projector `M` is the identity and
//! every routine reduces to its no-mean counterpart.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::fit::{profile_with_design, FitConfig, FittedModel};
use crate::kernels::InputGrid;
use crate::likelihood::{solve_loadings, FactorSystem, Workspace};
use crate::linalg::JitteredCholesky;
use crate::model::{LoadingMatrix, OutputMatrix};
use crate::stiefel::StiefelOptions;

/// Which columns make up the mean basis `h(x)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanBasis {
    /// Constant column.
    pub intercept: bool,
    /// One column per input coordinate.
    pub linear_input: bool,
    /// Named columns taken from a covariate table.
    pub covariate_columns: Vec<String>,
}

impl MeanBasis {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn intercept() -> Self {
        Self {
            intercept: true,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.intercept && !self.linear_input && self.covariate_columns.is_empty()
    }

    /// Number of basis columns for `p`-dimensional inputs.
    pub fn q(&self, p: usize) -> usize {
        usize::from(self.intercept)
            + if self.linear_input { p } else { 0 }
            + self.covariate_columns.len()
    }

    pub fn column_names(&self, p: usize) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("intercept".to_string());
        }
        if self.linear_input {
            names.extend((1..=p).map(|m| format!("x{m}")));
        }
        names.extend(self.covariate_columns.iter().cloned());
        names
    }

    /// The row `h(x)`; `covariates` holds the values of `covariate_columns` at `x`.
    pub fn row(&self, x: &[f64], covariates: &[f64]) -> Result<Vec<f64>> {
        if covariates.len() != self.covariate_columns.len() {
            return Err(GppcaError::arg(format!(
                "mean basis expects {} covariate values, got {}",
                self.covariate_columns.len(),
                covariates.len()
            )));
        }
        let mut row = Vec::with_capacity(self.q(x.len()));
        if self.intercept {
            row.push(1.0);
        }
        if self.linear_input {
            row.extend_from_slice(x);
        }
        row.extend_from_slice(covariates);
        Ok(row)
    }
}

/// A table of named covariates, one row per input.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    /// `n × c` values.
    pub values: DMatrix<f64>,
}

impl Covariates {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|c| c == name).ok_or_else(|| {
            GppcaError::arg(format!("covariate column {name:?} not found in {:?}", self.names))
        })
    }
}

/// The design matrix `H` for a grid and its least-squares factorization.
#[derive(Clone, Debug)]
pub struct MeanDesign {
    basis: MeanBasis,
    h: DMatrix<f64>,
    hth: Option<JitteredCholesky>,
}

impl MeanDesign {
    /// The empty design (`q = 0`) on `n` inputs.
    pub fn none(n: usize) -> Self {
        Self {
            basis: MeanBasis::none(),
            h: DMatrix::zeros(n, 0),
            hth: None,
        }
    }

    /// Wraps an explicit `n×q` design, checking that it has full column rank.
    pub fn from_matrix(basis: MeanBasis, h: DMatrix<f64>) -> Result<Self> {
        let (n, q) = h.shape();
        if q == 0 {
            return Ok(Self {
                basis,
                h,
                hth: None,
            });
        }
        if q >= n {
            return Err(GppcaError::arg(format!(
                "mean basis has {q} columns but only {n} inputs; need q < n"
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(GppcaError::arg("mean design has non-finite entries"));
        }
        let p = if basis.linear_input {
            q.saturating_sub(usize::from(basis.intercept) + basis.covariate_columns.len())
        } else {
            0
        };
        let mut names = basis.column_names(p);
        if names.len() != q {
            names = (1..=q).map(|j| format!("column {j}")).collect();
        }
        // modified Gram-Schmidt: a column whose residual vanishes is dependent on earlier ones
        let mut basis_vecs: Vec<DVector<f64>> = Vec::with_capacity(q);
        for j in 0..q {
            let col = h.column(j).into_owned();
            let norm = col.norm();
            let mut r = col;
            for b in &basis_vecs {
                let c = b.dot(&r);
                r -= b * c;
            }
            let rn = r.norm();
            if norm == 0.0 || rn <= 1e-10 * norm.max(1.0) {
                return Err(GppcaError::arg(format!(
                    "mean design is rank deficient: column {:?} is a linear combination of {:?}",
                    names[j],
                    &names[..j]
                )));
            }
            basis_vecs.push(r / rn);
        }
        let hth = JitteredCholesky::factor(&(h.transpose() * &h))?;
        Ok(Self {
            basis,
            h,
            hth: Some(hth),
        })
    }

    pub fn basis(&self) -> &MeanBasis {
        &self.basis
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn q(&self) -> usize {
        self.h.ncols()
    }

    /// `M = I − H(HᵀH)⁻¹Hᵀ` as a dense matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        let n = self.n();
        let eye = DMatrix::identity(n, n);
        match &self.hth {
            None => eye,
            Some(c) => eye - &self.h * c.solve(&self.h.transpose()),
        }
    }

    /// `Y M` for a `k×n` matrix `Y`, without forming `M`.
    pub fn residualize(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.hth {
            None => y.clone(),
            Some(c) => {
                let yh = y * &self.h;
                y - c.solve(&yh.transpose()).transpose() * self.h.transpose()
            }
        }
    }

    /// Least-squares coefficients `(HᵀH)⁻¹Hᵀ R` for an `n×m` right-hand side.
    pub fn least_squares(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.hth {
            None => DMatrix::zeros(0, r.ncols()),
            Some(c) => c.solve(&(self.h.transpose() * r)),
        }
    }

    /// `h (HᵀH)⁻¹ hᵀ` for a basis row `h`.
    pub fn leverage(&self, hrow: &DVector<f64>) -> f64 {
        match &self.hth {
            None => 0.0,
            Some(c) => hrow.dot(&c.solve_vec(hrow)),
        }
    }
}

/// Evaluates the basis on every grid point and checks the rank of `H`.
pub fn build_mean_design(
    basis: &MeanBasis,
    grid: &InputGrid,
    covariates: Option<&Covariates>,
) -> Result<MeanDesign> {
    let n = grid.len();
    let p = grid.dim();
    let q = basis.q(p);
    let cov_idx: Vec<usize> = if basis.covariate_columns.is_empty() {
        Vec::new()
    } else {
        let table = covariates.ok_or_else(|| {
            GppcaError::arg("mean basis names covariate columns but no covariate table was given")
        })?;
        if table.values.nrows() != n {
            return Err(GppcaError::arg(format!(
                "covariate table has {} rows for {n} inputs",
                table.values.nrows()
            )));
        }
        basis
            .covariate_columns
            .iter()
            .map(|c| table.column(c))
            .collect::<Result<_>>()?
    };
    let mut h = DMatrix::zeros(n, q);
    for i in 0..n {
        let cov: Vec<f64> = cov_idx
            .iter()
            .map(|&j| covariates.expect("checked above").values[(i, j)])
            .collect();
        let row = basis.row(grid.point(i), &cov)?;
        for (j, v) in row.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    MeanDesign::from_matrix(basis.clone(), h)
}

fn checked_systems(
    y: &DMatrix<f64>,
    a: &LoadingMatrix,
    corrs: &[DMatrix<f64>],
    taus: &[f64],
    design: &MeanDesign,
) -> Result<Vec<FactorSystem>> {
    let d = a.d();
    if a.k() != y.nrows() {
        return Err(GppcaError::arg(format!(
            "loadings have {} rows but the data has {} outputs",
            a.k(),
            y.nrows()
        )));
    }
    let broadcast = |len: usize, what: &str| -> Result<()> {
        if len == d || len == 1 {
            Ok(())
        } else {
            Err(GppcaError::arg(format!("expected 1 or {d} {what}, got {len}")))
        }
    };
    broadcast(corrs.len(), "correlation matrices")?;
    broadcast(taus.len(), "signal-to-noise ratios")?;
    (0..d)
        .map(|l| {
            let corr = &corrs[l.min(corrs.len() - 1)];
            let tau = taus[l.min(taus.len() - 1)];
            FactorSystem::from_correlation(corr.clone(), tau, design)
        })
        .collect()
}

/// `σ̂₀² = S²_M / (k(n−q))` for given loadings and per-factor `(K_l, τ_l)`.
///
/// `corrs` and `taus` hold either one entry per factor or a single shared entry.
pub fn noise_variance_mean(
    y: &DMatrix<f64>,
    a: &LoadingMatrix,
    corrs: &[DMatrix<f64>],
    taus: &[f64],
    design: &MeanDesign,
) -> Result<f64> {
    let ws = Workspace::new(y, design)?;
    let systems = checked_systems(y, a, corrs, taus, design)?;
    let quad: f64 = systems
        .iter()
        .zip(a.values().column_iter())
        .map(|(s, col)| ws.quad(s, &col.into_owned()))
        .sum();
    let s2 = ws.residual(quad)?;
    Ok(s2 / ws.dof())
}

/// Profile log-likelihood of the mean model at `(τ, γ)`, with `Â` maximized
/// over the Stiefel manifold and `σ₀²` profiled out (or fixed by the config).
pub fn profile_log_likelihood_mean(
    data: &OutputMatrix,
    taus: &[f64],
    ranges: &[Vec<f64>],
    design: &MeanDesign,
    config: &FitConfig,
) -> Result<f64> {
    profile_with_design(data, taus, ranges, design, config)
}

/// Maximizes `Σ_l a_lᵀ G_{l,M} a_l` over the Stiefel manifold.
///
/// With a single correlation/τ pair the problem is solved by the leading
/// eigenvectors of `G_M`; otherwise by curvilinear search from `init`.
pub fn estimate_loadings_mean(
    y: &DMatrix<f64>,
    corrs: &[DMatrix<f64>],
    taus: &[f64],
    design: &MeanDesign,
    init: &LoadingMatrix,
    opts: &StiefelOptions,
) -> Result<LoadingMatrix> {
    let d = init.d();
    let ws = Workspace::new(y, design)?;
    let systems = checked_systems(y, init, corrs, taus, design)?;
    let shared = corrs.len() == 1 && taus.len() == 1;
    let gs: Vec<DMatrix<f64>> = if shared {
        vec![ws.g_matrix(&systems[0]); d]
    } else {
        systems.iter().map(|s| ws.g_matrix(s)).collect()
    };
    let (a, _) = solve_loadings(&gs, shared, d, &[init.values().clone()], opts)?;
    Ok(LoadingMatrix::new_unchecked(a))
}

/// Posterior mean `B̂ = (HᵀH)⁻¹Hᵀ(Y − ÂẐ_M)ᵀ` of the regression coefficients (`q×k`).
pub fn regression_posterior_mean(model: &FittedModel) -> DMatrix<f64> {
    model.coefficients().clone()
}
