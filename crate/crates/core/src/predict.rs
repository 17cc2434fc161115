//! Predictive distributions at new inputs and the posterior of the latent field.

use nalgebra::{DMatrix, DVector};

use crate::error::{GppcaError, Result};
use crate::fit::FittedModel;
use crate::kernels::cross_correlation;
use crate::linalg::{symmetrize, JitteredCholesky};

/// Multiplier for central 95% Gaussian intervals.
pub const Z_95: f64 = 1.96;

/// A `k`-variate normal distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveNormal {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveNormal {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if covariance.shape() != (k, k) {
            return Err(GppcaError::arg("covariance does not match the mean length"));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_devs(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Central interval `mean ± z·sd` per coordinate.
    pub fn interval(&self, z: f64) -> (DVector<f64>, DVector<f64>) {
        let sd = self.std_devs() * z;
        (&self.mean - &sd, &self.mean + &sd)
    }

    /// Distribution of the rows not in `observed` given `values` on the rows in `observed`.
    pub fn condition(&self, observed: &[usize], values: &DVector<f64>) -> Result<Self> {
        let k = self.dim();
        if observed.is_empty() || observed.len() >= k {
            return Err(GppcaError::arg(format!(
                "observed rows must be a non-empty proper subset of the {k} outputs"
            )));
        }
        if values.len() != observed.len() {
            return Err(GppcaError::arg(format!(
                "{} observed values for {} observed rows",
                values.len(),
                observed.len()
            )));
        }
        let mut seen = vec![false; k];
        for &r in observed {
            if r >= k || seen[r] {
                return Err(GppcaError::arg(format!("invalid or repeated observed row {r}")));
            }
            seen[r] = true;
        }
        let free: Vec<usize> = (0..k).filter(|r| !seen[*r]).collect();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.covariance[(rows[i], cols[j])])
        };
        let s11 = pick(observed, observed);
        let s21 = pick(&free, observed);
        let s22 = pick(&free, &free);
        let chol = JitteredCholesky::factor(&s11).map_err(|e| {
            GppcaError::numeric(format!("covariance of the observed rows is singular: {e}"))
        })?;
        let mu1 = DVector::from_iterator(observed.len(), observed.iter().map(|&r| self.mean[r]));
        let mu2 = DVector::from_iterator(free.len(), free.iter().map(|&r| self.mean[r]));
        let gain = chol.solve(&s21.transpose()).transpose();
        let mean = mu2 + &gain * (values - mu1);
        let mut cov = s22 - &gain * s21.transpose();
        symmetrize(&mut cov);
        Ok(Self {
            mean,
            covariance: cov,
        })
    }
}

/// Posterior of the noise-free field `A Z` at the training inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPosterior {
    /// `Â Ẑ`, `k×n`.
    pub mean: DMatrix<f64>,
    /// Posterior variance of each factor at each input, `d×n`.
    pub factor_variances: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
}

impl FieldPosterior {
    /// Marginal variance of every entry of `A Z`, `k×n`.
    pub fn marginal_variances(&self) -> DMatrix<f64> {
        let a2 = self.loadings.map(|v| v * v);
        a2 * &self.factor_variances
    }

    /// `k×k` posterior covariance of column `i` of `A Z`.
    pub fn column_covariance(&self, i: usize) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.factor_variances.column(i).into_owned());
        &self.loadings * d * self.loadings.transpose()
    }

    /// Pointwise central 95% intervals `(lower, upper)`.
    pub fn intervals(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let sd = self.marginal_variances().map(|v| Z_95 * v.max(0.0).sqrt());
        (&self.mean - &sd, &self.mean + &sd)
    }
}

/// Posterior mean and pointwise variances of `A Z` given the data.
pub fn field_posterior(model: &FittedModel) -> FieldPosterior {
    let a = model.loadings().values();
    let s0 = model.hyper().sigma0_sq;
    let n = model.data().n();
    let mut vars = DMatrix::zeros(model.d(), n);
    for (l, sys) in model.systems().iter().enumerate() {
        // σ₀²(τK − τ²K P K), where P reduces to (τK + I)⁻¹ without a mean
        let pk = sys.apply_p(&sys.corr);
        for i in 0..n {
            let shrink: f64 = (0..n).map(|j| sys.corr[(i, j)] * pk[(j, i)]).sum();
            vars[(l, i)] = (s0 * (sys.tau - sys.tau * sys.tau * shrink)).max(0.0);
        }
    }
    FieldPosterior {
        mean: a * model.factor_means(),
        factor_variances: vars,
        loadings: a.clone(),
    }
}

fn predict_inner(model: &FittedModel, xstar: &[f64], hrow: Option<DVector<f64>>) -> Result<PredictiveNormal> {
    let grid = model.data().grid();
    if xstar.len() != grid.dim() {
        return Err(GppcaError::arg(format!(
            "prediction input has {} coordinates, model expects {}",
            xstar.len(),
            grid.dim()
        )));
    }
    let a = model.loadings().values();
    let hyper = model.hyper();
    let s0 = hyper.sigma0_sq;
    let k = a.nrows();
    let d = model.d();
    let mut zhat = DVector::zeros(d);
    let mut dvar = DVector::zeros(d);
    for (l, sys) in model.systems().iter().enumerate() {
        let kstar = cross_correlation(&hyper.kernels[l], grid, xstar)?;
        let tau = sys.tau;
        zhat[l] = tau * kstar.dot(&model.weights()[l]);
        let cinv_k = sys.chol.solve_vec(&kstar);
        let mut var = tau + 1.0 - tau * tau * kstar.dot(&cinv_k);
        if let (Some(h), Some(gls)) = (&hrow, sys.gls()) {
            let u = h - sys.cinv_h().transpose() * &kstar * tau;
            var += u.dot(&gls.solve_vec(&u));
        }
        dvar[l] = s0 * var.max(0.0);
    }
    let mut mean = a * &zhat;
    let leverage = match &hrow {
        Some(h) => {
            mean += model.coefficients().transpose() * h;
            model.design().leverage(h)
        }
        None => 0.0,
    };
    let proj = a * a.transpose();
    let mut cov = a * DMatrix::from_diagonal(&dvar) * a.transpose()
        + (DMatrix::identity(k, k) - proj) * (s0 * (1.0 + leverage));
    symmetrize(&mut cov);
    PredictiveNormal::new(mean, cov)
}

/// Predictive distribution of `y(x*)` for a model without a mean basis.
pub fn predict(model: &FittedModel, xstar: &[f64]) -> Result<PredictiveNormal> {
    if model.design().q() > 0 {
        return Err(GppcaError::arg(
            "model has a mean basis; use predict_with_mean and supply h(x*)",
        ));
    }
    predict_inner(model, xstar, None)
}

/// Predictive distribution of `y(x*)` including the regression mean.
///
/// `covariates` holds the values of the basis's covariate columns at `x*`.
pub fn predict_with_mean(
    model: &FittedModel,
    xstar: &[f64],
    covariates: &[f64],
) -> Result<PredictiveNormal> {
    if model.design().q() == 0 {
        return predict_inner(model, xstar, None);
    }
    let hrow = DVector::from_vec(model.design().basis().row(xstar, covariates)?);
    if hrow.len() != model.design().q() {
        return Err(GppcaError::arg("mean basis row has the wrong length"));
    }
    predict_inner(model, xstar, Some(hrow))
}

/// Predictive distribution of the unobserved outputs at `x*` given the
/// outputs in `observed` (0-based rows) took the values `y1`.
pub fn conditional_predict(
    model: &FittedModel,
    xstar: &[f64],
    covariates: &[f64],
    observed: &[usize],
    y1: &DVector<f64>,
) -> Result<PredictiveNormal> {
    predict_with_mean(model, xstar, covariates)?.condition(observed, y1)
}
