//! Synthetic scenarios, seeded replication and report aggregation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::baselines::{ly_loadings, pca_loadings};
use crate::error::{GppcaError, Result};
use crate::fit::{fit, FitConfig};
use crate::kernels::{build_correlation_matrix, InputGrid, KernelFamily, KernelSpec};
use crate::linalg::{orthonormalize, symmetrize};
use crate::metrics::{largest_principal_angle, mse};
use crate::model::{LoadingMatrix, OutputMatrix};
use crate::predict::field_posterior;

/// Draws a `k×d` matrix from the uniform distribution on the Stiefel manifold
/// (QR of a Gaussian matrix with the sign of `R`'s diagonal fixed).
pub fn sample_uniform_stiefel<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> LoadingMatrix {
    let g = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(rng));
    LoadingMatrix::new_unchecked(orthonormalize(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    Fixed(f64),
    /// Independent per-factor draw from `U[lo, hi]`.
    Uniform(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Sigma0Sq(f64),
    /// Signal-to-noise ratio `σ²/σ₀²`.
    Tau(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingLaw {
    UniformStiefel,
    IidUniformEntries,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorLaw {
    Gp,
    /// `Z_l(x) = cos(0.05 π θ_l x)` with `θ_l ~ U(0, 1)`.
    DeterministicCosine,
}

fn default_replicates() -> usize {
    20
}

/// A simulation design on the regular grid `x_i = i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    /// Kernel used to generate Gaussian-process factors.
    #[serde(default)]
    pub kernel: KernelFamily,
    pub range: RangePolicy,
    /// Factor variance `σ²`.
    #[serde(default = "one")]
    pub signal_variance: f64,
    pub noise: NoiseSpec,
    pub loadings: LoadingLaw,
    pub factors: FactorLaw,
    /// Fit GPPCA with one covariance shared by all factors.
    #[serde(default = "yes")]
    pub fit_shared: bool,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Names accepted by [`Scenario::builtin`].
pub const BUILTIN_SCENARIOS: &[&str] = &[
    "example1",
    "example1_tau4",
    "example2",
    "example3_exp",
    "example3_gauss",
    "example4",
    "demo",
];

impl Scenario {
    pub fn builtin(name: &str) -> Result<Self> {
        let base = |k, d, n, range, noise, loadings, factors, fit_shared| Scenario {
            name: name.to_string(),
            k,
            d,
            n,
            kernel: KernelFamily::Matern52,
            range,
            signal_variance: 1.0,
            noise,
            loadings,
            factors,
            fit_shared,
            replicates: 20,
            seed: 0,
        };
        use FactorLaw::*;
        use LoadingLaw::*;
        let s = match name {
            "example1" => base(8, 4, 200, RangePolicy::Fixed(100.0), NoiseSpec::Tau(100.0), UniformStiefel, Gp, true),
            "example1_tau4" => base(8, 4, 200, RangePolicy::Fixed(100.0), NoiseSpec::Tau(4.0), UniformStiefel, Gp, true),
            "example2" => base(
                8,
                4,
                200,
                RangePolicy::Uniform(10.0, 1000.0),
                NoiseSpec::Sigma0Sq(0.25),
                UniformStiefel,
                Gp,
                false,
            ),
            "example3_exp" => Scenario {
                kernel: KernelFamily::Exponential,
                ..base(20, 4, 100, RangePolicy::Fixed(100.0), NoiseSpec::Tau(4.0), IidUniformEntries, Gp, true)
            },
            "example3_gauss" => Scenario {
                kernel: KernelFamily::Gaussian,
                ..base(20, 4, 100, RangePolicy::Fixed(100.0), NoiseSpec::Tau(0.25), IidUniformEntries, Gp, true)
            },
            "example4" => base(
                20,
                4,
                100,
                RangePolicy::Fixed(100.0),
                NoiseSpec::Sigma0Sq(0.25),
                IidUniformEntries,
                DeterministicCosine,
                true,
            ),
            "demo" => base(2, 1, 100, RangePolicy::Fixed(100.0), NoiseSpec::Sigma0Sq(1.0), UniformStiefel, Gp, true),
            _ => {
                return Err(GppcaError::arg(format!(
                    "unknown scenario {name:?}; built-in scenarios are {BUILTIN_SCENARIOS:?}"
                )))
            }
        };
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GppcaError::arg(m));
        if self.d == 0 || self.d > self.k {
            return bad(format!("scenario needs 1 ≤ d ≤ k, got d = {}, k = {}", self.d, self.k));
        }
        if self.n < 2 {
            return bad(format!("scenario needs n ≥ 2, got {}", self.n));
        }
        if self.replicates == 0 {
            return bad("scenario needs at least one replicate".into());
        }
        if !(self.signal_variance >= 0.0 && self.signal_variance.is_finite()) {
            return bad(format!("invalid signal variance {}", self.signal_variance));
        }
        match self.range {
            RangePolicy::Fixed(g) if !(g > 0.0 && g.is_finite()) => {
                return bad(format!("invalid range {g}"))
            }
            RangePolicy::Uniform(lo, hi) if !(lo > 0.0 && hi >= lo && hi.is_finite()) => {
                return bad(format!("invalid range interval [{lo}, {hi}]"))
            }
            _ => {}
        }
        match self.noise {
            NoiseSpec::Sigma0Sq(s) if !(s >= 0.0 && s.is_finite()) => bad(format!("invalid noise variance {s}")),
            NoiseSpec::Tau(t) if !(t > 0.0 && t.is_finite()) => bad(format!("invalid signal-to-noise ratio {t}")),
            _ => Ok(()),
        }
    }

    /// Noise variance `σ₀²`, derived from `τ` when the scenario is keyed by it.
    pub fn sigma0_sq(&self) -> f64 {
        match self.noise {
            NoiseSpec::Sigma0Sq(s) => s,
            NoiseSpec::Tau(t) => self.signal_variance / t,
        }
    }

    /// Signal-to-noise ratio `σ²/σ₀²` (infinite without noise).
    pub fn tau(&self) -> f64 {
        match self.noise {
            NoiseSpec::Tau(t) => t,
            NoiseSpec::Sigma0Sq(s) => self.signal_variance / s,
        }
    }

    pub fn grid(&self) -> InputGrid {
        InputGrid::regular(self.n)
    }
}

/// One simulated data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    /// Generating loadings (not necessarily orthonormal).
    pub a_true: DMatrix<f64>,
    pub z_true: DMatrix<f64>,
    /// `A Z`.
    pub mean_true: DMatrix<f64>,
}

impl Dataset {
    pub fn output(&self) -> Result<OutputMatrix> {
        OutputMatrix::on_regular_grid(self.y.clone())
    }
}

/// Draws a zero-mean Gaussian vector with covariance `cov` using an
/// eigen-decomposition with negative eigenvalues clamped to zero.
fn sample_gaussian<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let mut c = cov.clone();
    symmetrize(&mut c);
    let eig = SymmetricEigen::new(c);
    let n = cov.nrows();
    let eps: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let scaled = DVector::from_fn(n, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * eps[i]);
    &eig.eigenvectors * scaled
}

/// Rows `cos(0.05 π θ_l x_i)` over the first input coordinate.
pub fn cosine_factors(thetas: &[f64], grid: &InputGrid) -> DMatrix<f64> {
    DMatrix::from_fn(thetas.len(), grid.len(), |l, i| {
        (0.05 * std::f64::consts::PI * thetas[l] * grid.point(i)[0]).cos()
    })
}

/// Generates replicate `replicate` of `scenario`. The random stream depends
/// only on the scenario seed and the replicate index.
pub fn simulate_dataset(scenario: &Scenario, replicate: usize) -> Result<Dataset> {
    scenario.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate as u64);
    let (k, d, n) = (scenario.k, scenario.d, scenario.n);
    let a = match scenario.loadings {
        LoadingLaw::UniformStiefel => sample_uniform_stiefel(k, d, &mut rng).into_inner(),
        LoadingLaw::IidUniformEntries => {
            let u = Uniform::new(0.0, 1.0).expect("valid interval");
            DMatrix::from_fn(k, d, |_, _| u.sample(&mut rng))
        }
    };
    let grid = scenario.grid();
    let mut z = DMatrix::zeros(d, n);
    match scenario.factors {
        FactorLaw::Gp => {
            let ranges: Vec<f64> = match scenario.range {
                RangePolicy::Fixed(g) => vec![g; d],
                RangePolicy::Uniform(lo, hi) => {
                    let u = Uniform::new_inclusive(lo, hi).expect("validated interval");
                    (0..d).map(|_| u.sample(&mut rng)).collect()
                }
            };
            let mut cached: Option<(f64, DMatrix<f64>)> = None;
            for (l, &g) in ranges.iter().enumerate() {
                let cov = match &cached {
                    Some((cg, c)) if *cg == g => c.clone(),
                    _ => {
                        let spec = KernelSpec::new(scenario.kernel, vec![g])?;
                        let c = build_correlation_matrix(&spec, &grid)? * scenario.signal_variance;
                        cached = Some((g, c.clone()));
                        c
                    }
                };
                z.set_row(l, &sample_gaussian(&cov, &mut rng).transpose());
            }
        }
        FactorLaw::DeterministicCosine => {
            let u = Uniform::new(0.0, 1.0).expect("valid interval");
            let thetas: Vec<f64> = (0..d).map(|_| u.sample(&mut rng)).collect();
            z = cosine_factors(&thetas, &grid);
        }
    }
    let mean = &a * &z;
    let sd = scenario.sigma0_sq().sqrt();
    let y = if sd > 0.0 {
        let noise = DMatrix::from_fn(k, n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sd * e
        });
        &mean + noise
    } else {
        mean.clone()
    };
    Ok(Dataset {
        y,
        a_true: a,
        z_true: z,
        mean_true: mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Gppca,
    Ly1,
    Ly5,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Gppca => "gppca",
            Method::Ly1 => "ly1",
            Method::Ly5 => "ly5",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GppcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pca" => Ok(Method::Pca),
            "gppca" => Ok(Method::Gppca),
            "ly1" => Ok(Method::Ly1),
            "ly5" => Ok(Method::Ly5),
            other => Err(GppcaError::arg(format!(
                "unknown method {other:?}; expected pca, gppca, ly1 or ly5"
            ))),
        }
    }
}

/// Outcome of one method on one replicate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub angle: Option<f64>,
    pub mse: Option<f64>,
    /// Estimated noise variance (GPPCA only).
    pub sigma0_sq: Option<f64>,
    /// Largest orthonormality defect seen by the Stiefel optimizer (GPPCA only).
    pub max_defect: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Per-method aggregate over replicates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub failures: usize,
    pub median_angle: f64,
    pub mean_angle: f64,
    /// Squared error pooled over successful replicates, divided by `k·n·N`.
    pub avg_mse: f64,
    pub median_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub records: Vec<ReplicateRecord>,
    pub summaries: Vec<MethodSummary>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &ReplicateRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn failures(&self) -> usize {
        self.summaries.iter().map(|s| s.failures).sum()
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    }
}

/// The fit settings used for GPPCA on a scenario replicate.
pub fn gppca_config(scenario: &Scenario, replicate: usize) -> FitConfig {
    let mut cfg = FitConfig::new(scenario.d);
    cfg.shared_covariance = scenario.fit_shared;
    cfg.seed = scenario.seed.wrapping_add(replicate as u64);
    cfg
}

struct MethodOutcome {
    loadings: DMatrix<f64>,
    mean: DMatrix<f64>,
    sigma0_sq: Option<f64>,
    max_defect: Option<f64>,
}

fn run_method(method: Method, scenario: &Scenario, data: &Dataset, replicate: usize) -> Result<MethodOutcome> {
    let d = scenario.d;
    let project = |a: DMatrix<f64>| {
        let mean = &a * (a.transpose() * &data.y);
        MethodOutcome {
            loadings: a,
            mean,
            sigma0_sq: None,
            max_defect: None,
        }
    };
    match method {
        Method::Pca => Ok(project(pca_loadings(&data.y, d)?.loadings.into_inner())),
        Method::Ly1 => Ok(project(ly_loadings(&data.y, d, 1)?.loadings.into_inner())),
        Method::Ly5 => Ok(project(ly_loadings(&data.y, d, 5)?.loadings.into_inner())),
        Method::Gppca => {
            let model = fit(&data.output()?, &gppca_config(scenario, replicate))?;
            let post = field_posterior(&model);
            Ok(MethodOutcome {
                loadings: model.loadings().values().clone(),
                mean: post.mean,
                sigma0_sq: Some(model.hyper().sigma0_sq),
                max_defect: Some(model.report().max_orthonormality_defect),
            })
        }
    }
}

/// Scores one replicate against the truth. The subspace comparison uses an
/// orthonormal basis of the generating loadings.
fn score(outcome: &MethodOutcome, data: &Dataset) -> Result<(f64, f64)> {
    let truth = orthonormalize(&data.a_true);
    let angle = largest_principal_angle(&truth, &outcome.loadings)?;
    Ok((angle, mse(&outcome.mean, &data.mean_true)?))
}

/// Runs every method on every replicate of the scenario. Failures are recorded
/// per replicate rather than aborting the run.
pub fn run_experiment(scenario: &Scenario, methods: &[Method]) -> Result<ExperimentReport> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(GppcaError::arg("no methods requested"));
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(scenario.replicates * methods.len());
    for r in 0..scenario.replicates {
        let data = simulate_dataset(scenario, r)?;
        for &m in methods {
            let t0 = Instant::now();
            let result = run_method(m, scenario, &data, r).and_then(|o| score(&o, &data).map(|s| (s, o.sigma0_sq, o.max_defect)));
            let seconds = t0.elapsed().as_secs_f64();
            records.push(match result {
                Ok(((angle, err), s0, defect)) => ReplicateRecord {
                    replicate: r,
                    method: m,
                    angle: Some(angle),
                    mse: Some(err),
                    sigma0_sq: s0,
                    max_defect: defect,
                    error: None,
                    seconds,
                },
                Err(e) => ReplicateRecord {
                    replicate: r,
                    method: m,
                    angle: None,
                    mse: None,
                    sigma0_sq: None,
                    max_defect: None,
                    error: Some(e.to_string()),
                    seconds,
                },
            });
        }
    }
    let summaries = methods
        .iter()
        .map(|&m| {
            let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == m).collect();
            let mut angles: Vec<f64> = mine.iter().filter_map(|r| r.angle).collect();
            let mut mses: Vec<f64> = mine.iter().filter_map(|r| r.mse).collect();
            let ok = mses.len();
            MethodSummary {
                method: m,
                replicates: mine.len(),
                failures: mine.len() - ok,
                mean_angle: angles.iter().sum::<f64>() / angles.len().max(1) as f64,
                median_angle: median(&mut angles),
                avg_mse: if ok == 0 {
                    f64::NAN
                } else {
                    mses.iter().sum::<f64>() / ok as f64
                },
                median_mse: median(&mut mses),
            }
        })
        .collect();
    Ok(ExperimentReport {
        scenario: scenario.clone(),
        methods: methods.to_vec(),
        records,
        summaries,
        seconds: start.elapsed().as_secs_f64(),
    })
}
