//! Hyperparameter estimation and the fitted model.
//!
//! `(τ, γ)` are searched in log space by BFGS with central finite-difference
//! gradients. Each objective evaluation re-solves the loadings (closed form
//! for a shared covariance, curvilinear search otherwise). Finite-difference
//! probes keep the loadings fixed at the current solution: at an optimum in
//! `A` the profile and fixed-`A` likelihoods have the same first derivative
//! in `(τ, γ)`, and a probe then only refactors one factor.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::hyperopt::{minimize_bfgs, BfgsOptions, Objective};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihood::{build_systems, solve_loadings, FactorSystem, Workspace};
use crate::linalg::orthonormality_defect;
use crate::mean::{build_mean_design, MeanBasis, MeanDesign};
use crate::model::{HyperParams, LoadingMatrix, OutputMatrix};
use crate::sim::sample_uniform_stiefel;
use crate::stiefel::StiefelOptions;

const TAU_BOUNDS: (f64, f64) = (1e-8, 1e8);
const RANGE_BOUNDS: (f64, f64) = (1e-4, 1e3);

/// How the loadings are re-solved inside each likelihood evaluation when
/// factors have distinct covariances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerPolicy {
    /// Start from the previous evaluation's solution.
    #[default]
    WarmStart,
    /// Previous solution, PCA and random starts at every evaluation.
    MultiStart,
}

fn default_true() -> bool {
    true
}

fn default_fd_step() -> f64 {
    1e-4
}

fn default_starts() -> usize {
    5
}

/// Settings for [`fit`]. Only `d` is required when read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Number of latent factors.
    pub d: usize,
    #[serde(default)]
    pub kernel: KernelFamily,
    /// Tie `τ` and `γ` across factors.
    #[serde(default = "default_true")]
    pub shared_covariance: bool,
    /// Use this noise variance instead of estimating it.
    #[serde(default)]
    pub fixed_noise: Option<f64>,
    /// Hold the range parameters (one per input dimension) at these values.
    #[serde(default)]
    pub fixed_ranges: Option<Vec<f64>>,
    #[serde(default)]
    pub mean: MeanBasis,
    #[serde(default)]
    pub stiefel: StiefelOptions,
    #[serde(default)]
    pub optimizer: BfgsOptions,
    /// Finite-difference step in log-parameter space.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Starts for the final loading solve (one PCA start plus random ones).
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    #[serde(default)]
    pub inner_policy: InnerPolicy,
    /// Seed for the random starting loadings.
    #[serde(default)]
    pub seed: u64,
}

impl FitConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            kernel: KernelFamily::default(),
            shared_covariance: true,
            fixed_noise: None,
            fixed_ranges: None,
            mean: MeanBasis::default(),
            stiefel: StiefelOptions::default(),
            optimizer: BfgsOptions::default(),
            fd_step: default_fd_step(),
            n_starts: default_starts(),
            inner_policy: InnerPolicy::default(),
            seed: 0,
        }
    }

    pub fn distinct(mut self) -> Self {
        self.shared_covariance = false;
        self
    }

    fn validate(&self, k: usize, n: usize, p: usize, q: usize) -> Result<()> {
        if self.d == 0 || self.d > k {
            return Err(GppcaError::arg(format!(
                "number of factors d must be in 1..={k}, got {}",
                self.d
            )));
        }
        if n < 2 {
            return Err(GppcaError::arg("fitting needs at least two inputs"));
        }
        if q >= n {
            return Err(GppcaError::arg(format!("mean basis has {q} columns for {n} inputs")));
        }
        if let Some(s) = self.fixed_noise {
            if !(s > 0.0 && s.is_finite()) {
                return Err(GppcaError::arg(format!("fixed noise variance must be positive, got {s}")));
            }
        }
        if let Some(r) = &self.fixed_ranges {
            KernelSpec::new(self.kernel, r.clone())?;
            if r.len() != p {
                return Err(GppcaError::arg(format!(
                    "{} fixed ranges given for {p}-dimensional inputs",
                    r.len()
                )));
            }
        }
        if !(self.fd_step > 0.0 && self.fd_step < 1.0) {
            return Err(GppcaError::arg(format!("fd_step must be in (0, 1), got {}", self.fd_step)));
        }
        if self.n_starts == 0 {
            return Err(GppcaError::arg("n_starts must be at least 1"));
        }
        if self.optimizer.max_iters == 0 || self.optimizer.rel_tol.is_nan() || self.optimizer.rel_tol < 0.0 {
            return Err(GppcaError::arg("invalid hyperparameter optimizer settings"));
        }
        self.stiefel.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Profile (or fixed-noise) log-likelihood at the estimate, up to constants.
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Largest orthonormality defect over all loading iterates.
    pub max_orthonormality_defect: f64,
}

/// Maps the flat log-parameter vector onto per-block `(τ, γ)`.
#[derive(Clone, Debug)]
struct Layout {
    family: KernelFamily,
    d: usize,
    shared: bool,
    p: usize,
    fixed_ranges: Option<Vec<f64>>,
}

impl Layout {
    fn blocks(&self) -> usize {
        if self.shared {
            1
        } else {
            self.d
        }
    }

    fn per_block(&self) -> usize {
        1 + if self.fixed_ranges.is_some() { 0 } else { self.p }
    }

    fn factors_in(&self, b: usize) -> std::ops::Range<usize> {
        if self.shared {
            0..self.d
        } else {
            b..b + 1
        }
    }

    fn decode_block(&self, x: &[f64], b: usize) -> (f64, KernelSpec) {
        let w = &x[b * self.per_block()..(b + 1) * self.per_block()];
        let ranges = match &self.fixed_ranges {
            Some(r) => r.clone(),
            None => w[1..].iter().map(|v| v.exp()).collect(),
        };
        (
            w[0].exp(),
            KernelSpec {
                family: self.family,
                ranges,
            },
        )
    }

    fn decode(&self, x: &[f64]) -> (Vec<f64>, Vec<KernelSpec>) {
        (0..self.blocks()).map(|b| self.decode_block(x, b)).unzip()
    }

    fn start_and_bounds(&self, diameters: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut x0, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.blocks() {
            x0.push(0.0);
            lo.push(TAU_BOUNDS.0.ln());
            hi.push(TAU_BOUNDS.1.ln());
            if self.fixed_ranges.is_none() {
                for &diam in diameters {
                    let diam = if diam > 0.0 { diam } else { 1.0 };
                    x0.push((diam / 2.0).ln());
                    lo.push((RANGE_BOUNDS.0 * diam).ln());
                    hi.push((RANGE_BOUNDS.1 * diam).ln());
                }
            }
        }
        (x0, lo, hi)
    }
}

struct EvalState {
    x: Vec<f64>,
    a: DMatrix<f64>,
    log_dets: Vec<f64>,
    quads: Vec<f64>,
    ll: f64,
}

struct ProfileObjective<'a> {
    ws: Workspace,
    data: &'a OutputMatrix,
    design: &'a MeanDesign,
    cfg: &'a FitConfig,
    layout: Layout,
    extra_starts: Vec<DMatrix<f64>>,
    warm: DMatrix<f64>,
    state: Option<EvalState>,
    max_defect: f64,
}

impl<'a> ProfileObjective<'a> {
    fn evaluate(&mut self, x: &[f64], starts_policy: InnerPolicy) -> Result<EvalState> {
        let (taus, specs) = self.layout.decode(x);
        let systems = build_systems(self.data, &taus, &specs, self.design)?;
        let d = self.layout.d;
        let gs: Vec<DMatrix<f64>> = if self.layout.shared {
            vec![self.ws.g_matrix(&systems[0]); d]
        } else {
            systems.iter().map(|s| self.ws.g_matrix(s)).collect()
        };
        let mut starts = vec![self.warm.clone()];
        if starts_policy == InnerPolicy::MultiStart {
            starts.extend(self.extra_starts.iter().cloned());
        }
        let (a, rep) = solve_loadings(&gs, self.layout.shared, d, &starts, &self.cfg.stiefel)?;
        if let Some(rep) = rep {
            self.max_defect = self.max_defect.max(rep.max_defect);
        }
        let mut log_dets = Vec::with_capacity(systems.len());
        let mut quads = Vec::with_capacity(systems.len());
        for (b, sys) in systems.iter().enumerate() {
            let range = self.layout.factors_in(b);
            log_dets.push(sys.log_det() * range.len() as f64);
            quads.push(range.map(|l| a.column(l).dot(&(&gs[l] * a.column(l)))).sum());
        }
        let ll = self.log_likelihood(&log_dets, &quads, &taus, &specs)?;
        Ok(EvalState {
            x: x.to_vec(),
            a,
            log_dets,
            quads,
            ll,
        })
    }

    fn log_likelihood(
        &self,
        log_dets: &[f64],
        quads: &[f64],
        taus: &[f64],
        specs: &[KernelSpec],
    ) -> Result<f64> {
        let s2 = self.ws.residual(quads.iter().sum())?;
        let ll = self
            .ws
            .log_likelihood(log_dets.iter().sum(), s2, self.cfg.fixed_noise);
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(GppcaError::numeric(format!(
                "log-likelihood is not finite at τ = {taus:?}, ranges = {:?} (residual {s2:.3e})",
                specs.iter().map(|s| &s.ranges).collect::<Vec<_>>()
            )))
        }
    }
}

impl Objective for ProfileObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let state = self.evaluate(x, self.cfg.inner_policy)?;
        self.warm = state.a.clone();
        let ll = state.ll;
        self.state = Some(state);
        Ok(-ll)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if self.state.as_ref().is_none_or(|s| s.x != x) {
            self.value(x)?;
        }
        let state = self.state.as_ref().expect("state set by value");
        let h = self.cfg.fd_step;
        let per = self.layout.per_block();
        let mut grad = vec![0.0; x.len()];
        for (j, g) in grad.iter_mut().enumerate() {
            let b = j / per;
            let mut lls = [0.0; 2];
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut xp = x.to_vec();
                xp[j] += sign * h;
                let (tau, spec) = self.layout.decode_block(&xp, b);
                let sys = FactorSystem::new(&spec, tau, self.data.grid(), self.design)?;
                let range = self.layout.factors_in(b);
                let mut log_dets = state.log_dets.clone();
                let mut quads = state.quads.clone();
                log_dets[b] = sys.log_det() * range.len() as f64;
                quads[b] = range
                    .map(|l| self.ws.quad(&sys, &state.a.column(l).into_owned()))
                    .sum();
                lls[slot] = self.log_likelihood(&log_dets, &quads, &[tau], &[spec])?;
            }
            *g = -(lls[0] - lls[1]) / (2.0 * h);
        }
        Ok(grad)
    }
}

fn random_starts(k: usize, d: usize, count: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_uniform_stiefel(k, d, &mut rng).into_inner())
        .collect()
}

/// A fitted latent-factor model with cached per-factor factorizations.
#[derive(Clone, Debug)]
pub struct FittedModel {
    loadings: LoadingMatrix,
    hyper: HyperParams,
    data: OutputMatrix,
    design: MeanDesign,
    systems: Vec<FactorSystem>,
    /// `P_l Yᵀ a_l` per factor.
    weights: Vec<DVector<f64>>,
    /// Posterior mean of the factors, `d×n`.
    factors: DMatrix<f64>,
    /// Posterior mean of the regression coefficients, `q×k`.
    coefficients: DMatrix<f64>,
    report: FitReport,
}

impl FittedModel {
    /// Assembles a model from estimates, rebuilding the factorizations.
    pub fn from_parts(
        data: OutputMatrix,
        loadings: LoadingMatrix,
        hyper: HyperParams,
        design: MeanDesign,
        report: FitReport,
    ) -> Result<Self> {
        hyper.validate()?;
        let d = loadings.d();
        if hyper.taus.len() != d || loadings.k() != data.k() || design.n() != data.n() {
            return Err(GppcaError::arg("inconsistent model components"));
        }
        let systems: Vec<FactorSystem> = hyper
            .taus
            .iter()
            .zip(&hyper.kernels)
            .map(|(&tau, spec)| FactorSystem::new(spec, tau, data.grid(), &design))
            .collect::<Result<_>>()?;
        let y = data.values();
        let a = loadings.values();
        let mut weights = Vec::with_capacity(d);
        let mut factors = DMatrix::zeros(d, data.n());
        for (l, sys) in systems.iter().enumerate() {
            let yl = y.transpose() * a.column(l);
            let w = sys.apply_p_vec(&yl);
            let z = &sys.corr * &w * sys.tau;
            factors.set_row(l, &z.transpose());
            weights.push(w);
        }
        let resid = y - a * &factors;
        let coefficients = design.least_squares(&resid.transpose());
        Ok(Self {
            loadings,
            hyper,
            data,
            design,
            systems,
            weights,
            factors,
            coefficients,
            report,
        })
    }

    pub fn loadings(&self) -> &LoadingMatrix {
        &self.loadings
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn data(&self) -> &OutputMatrix {
        &self.data
    }

    pub fn design(&self) -> &MeanDesign {
        &self.design
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    pub fn d(&self) -> usize {
        self.loadings.d()
    }

    /// Posterior mean of the factor matrix `Z`.
    pub fn factor_means(&self) -> &DMatrix<f64> {
        &self.factors
    }

    /// Posterior mean of the regression coefficients (`q×k`, empty without a mean).
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    /// `Σ̂_l = σ̂₀² τ̂_l K̂_l`.
    pub fn factor_covariance(&self, l: usize) -> DMatrix<f64> {
        let sys = &self.systems[l];
        &sys.corr * (sys.tau * self.hyper.sigma0_sq)
    }

    /// Lower Cholesky factor of `Σ̂_l + σ̂₀² I = σ̂₀²(τ̂K̂ + I)` (up to jitter).
    pub fn marginal_factor(&self, l: usize) -> DMatrix<f64> {
        let l_chol = self.systems[l].chol.lower();
        l_chol * self.hyper.sigma0_sq.sqrt()
    }

    pub(crate) fn systems(&self) -> &[FactorSystem] {
        &self.systems
    }

    pub(crate) fn weights(&self) -> &[DVector<f64>] {
        &self.weights
    }
}

fn check_data(data: &OutputMatrix, design: &MeanDesign, cfg: &FitConfig) -> Result<()> {
    cfg.validate(data.k(), data.n(), data.grid().dim(), design.q())?;
    if design.n() != data.n() {
        return Err(GppcaError::arg("mean design and data disagree on n"));
    }
    Ok(())
}

/// Fits the model without covariates in the mean basis.
pub fn fit(data: &OutputMatrix, config: &FitConfig) -> Result<FittedModel> {
    let design = build_mean_design(&config.mean, data.grid(), None)?;
    fit_with_design(data, config, design)
}

/// Fits the model with an explicit mean design.
pub fn fit_with_design(
    data: &OutputMatrix,
    config: &FitConfig,
    design: MeanDesign,
) -> Result<FittedModel> {
    check_data(data, &design, config)?;
    let ws = Workspace::new(data.values(), &design)?;
    if ws.trace().is_nan() || ws.trace() <= 0.0 {
        return Err(GppcaError::arg(
            "data have zero variance after removing the mean; nothing to fit",
        ));
    }
    let (k, d) = (data.k(), config.d);
    let pca = ws.pca_start(d)?;
    let mut extra_starts = vec![pca.clone()];
    if !config.shared_covariance {
        extra_starts.extend(random_starts(k, d, config.n_starts - 1, config.seed));
    }
    let layout = Layout {
        family: config.kernel,
        d,
        shared: config.shared_covariance,
        p: data.grid().dim(),
        fixed_ranges: config.fixed_ranges.clone(),
    };
    let (x0, lo, hi) = layout.start_and_bounds(&data.grid().diameters());
    let mut obj = ProfileObjective {
        ws,
        data,
        design: &design,
        cfg: config,
        layout: layout.clone(),
        extra_starts,
        warm: pca,
        state: None,
        max_defect: 0.0,
    };
    let rep = minimize_bfgs(&mut obj, &x0, &lo, &hi, &config.optimizer)?;

    // polish the loadings at the estimate from every start
    let state = obj.evaluate(&rep.x, InnerPolicy::MultiStart)?;
    let (taus, specs) = layout.decode(&rep.x);
    let s2 = obj.ws.residual(state.quads.iter().sum())?;
    let sigma0_sq = config.fixed_noise.unwrap_or(s2 / obj.ws.dof());
    let hyper = HyperParams {
        sigma0_sq,
        taus: (0..d).map(|l| taus[if layout.shared { 0 } else { l }]).collect(),
        kernels: (0..d)
            .map(|l| specs[if layout.shared { 0 } else { l }].clone())
            .collect(),
        shared_covariance: layout.shared,
        fixed_noise: config.fixed_noise,
    };
    let report = FitReport {
        log_likelihood: state.ll,
        converged: rep.converged,
        iterations: rep.iterations,
        evaluations: rep.evaluations,
        max_orthonormality_defect: obj.max_defect.max(orthonormality_defect(&state.a)),
    };
    let loadings = LoadingMatrix::new_unchecked(state.a);
    FittedModel::from_parts(data.clone(), loadings, hyper, design, report)
}

fn expand<T: Clone>(values: &[T], d: usize, shared: bool, what: &str) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0].clone(); d]),
        len if len == d && !shared => Ok(values.to_vec()),
        len => Err(GppcaError::arg(format!(
            "expected {} {what}, got {len}",
            if shared { "1".to_string() } else { format!("1 or {d}") }
        ))),
    }
}

pub(crate) fn profile_with_design(
    data: &OutputMatrix,
    taus: &[f64],
    ranges: &[Vec<f64>],
    design: &MeanDesign,
    config: &FitConfig,
) -> Result<f64> {
    check_data(data, design, config)?;
    let d = config.d;
    let shared = config.shared_covariance;
    let taus = expand(taus, d, shared, "signal-to-noise ratios")?;
    let ranges = expand(ranges, d, shared, "range vectors")?;
    let specs: Vec<KernelSpec> = ranges
        .into_iter()
        .map(|r| KernelSpec::new(config.kernel, r))
        .collect::<Result<_>>()?;
    let ws = Workspace::new(data.values(), design)?;
    let blocks = if shared { 1 } else { d };
    let systems = build_systems(data, &taus[..blocks], &specs[..blocks], design)?;
    let gs: Vec<DMatrix<f64>> = (0..d)
        .map(|l| ws.g_matrix(&systems[if shared { 0 } else { l }]))
        .collect();
    let mut starts = vec![ws.pca_start(d)?];
    if !shared {
        starts.extend(random_starts(data.k(), d, config.n_starts - 1, config.seed));
    }
    let (a, _) = solve_loadings(&gs, shared, d, &starts, &config.stiefel)?;
    let quad: f64 = (0..d).map(|l| a.column(l).dot(&(&gs[l] * a.column(l)))).sum();
    let log_det: f64 = (0..d)
        .map(|l| systems[if shared { 0 } else { l }].log_det())
        .sum();
    let s2 = ws.residual(quad)?;
    let ll = ws.log_likelihood(log_det, s2, config.fixed_noise);
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(GppcaError::numeric(format!(
            "log-likelihood is not finite at τ = {taus:?}, kernels = {specs:?}"
        )))
    }
}

/// Profile log-likelihood at `(τ, γ)` with the loadings and (unless fixed)
/// the noise variance replaced by their maximizers.
///
/// `taus` and `ranges` hold one entry per factor, or a single entry applied
/// to every factor.
pub fn profile_log_likelihood(
    data: &OutputMatrix,
    taus: &[f64],
    ranges: &[Vec<f64>],
    config: &FitConfig,
) -> Result<f64> {
    let design = build_mean_design(&config.mean, data.grid(), None)?;
    profile_with_design(data, taus, ranges, &design, config)
}
