//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criterion numbers given as arguments restrict
//! the run, e.g. `cargo test --test acceptance -- 3 7`.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use gppca::dense::{joint_covariance_direct, joint_precision_closed_form};
use gppca::sim::{gppca_config, NoiseSpec, RangePolicy};
use gppca::{
    build_correlation_matrix, build_mean_design, conditional_predict, estimate_loadings_shared, fit,
    g_matrix, kernel_eval, largest_principal_angle, optimize_on_stiefel, pca_loadings, predict,
    predict_with_mean, profile_log_likelihood, run_experiment, sample_uniform_stiefel,
    simulate_dataset, stiefel_gradient, stiefel_objective, FitConfig, FitReport, FittedModel,
    HyperParams, InputGrid, KernelFamily, KernelSpec, LoadingMatrix, MeanBasis, Method,
    OutputMatrix, Scenario, StiefelOptions,
};

type Outcome = Result<String, String>;

struct Ctx {
    max_defect: Cell<f64>,
    optimizer_runs: Cell<usize>,
}

impl Ctx {
    fn record_defect(&self, defect: f64) {
        self.max_defect.set(self.max_defect.get().max(defect));
        self.optimizer_runs.set(self.optimizer_runs.get() + 1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{detail}; took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
    } else {
        Ok(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_family(rng: &mut ChaCha8Rng) -> KernelFamily {
    [KernelFamily::Matern52, KernelFamily::Exponential, KernelFamily::Gaussian][rng.random_range(0..3)]
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, p: usize) -> InputGrid {
    InputGrid::new((0..n).map(|_| (0..p).map(|_| rng.random_range(0.0..3.0)).collect()).collect()).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, p: usize) -> KernelSpec {
    KernelSpec::new(random_family(rng), (0..p).map(|_| rng.random_range(0.3..3.0)).collect()).unwrap()
}

fn kernel_matrix(spec: &KernelSpec, pts: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(pts.len(), pts.len(), |i, j| kernel_eval(spec, &pts[i], &pts[j]).unwrap())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

fn c1_precision_identity(_: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for inst in 0..50 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=k.min(3));
        let s0 = [0.1, 1.0, 10.0][inst % 3];
        let grid = random_grid(&mut rng, n, 1);
        let a = sample_uniform_stiefel(k, d, &mut rng).into_inner();
        let sigmas: Vec<DMatrix<f64>> = (0..d)
            .map(|_| {
                let spec = random_spec(&mut rng, 1);
                kernel_matrix(&spec, grid.points()) * rng.random_range(0.1..10.0)
            })
            .collect();
        let cov = joint_covariance_direct(&a, &sigmas, s0).unwrap();
        let prec = joint_precision_closed_form(&a, &sigmas, s0).unwrap();
        let resid = &prec * &cov - DMatrix::identity(n * k, n * k);
        worst = worst.max(max_abs(&resid));
    }
    let detail = format!("max |PC - I| = {worst:.2e} over 50 instances");
    if worst < 1e-8 {
        within(start, Duration::from_secs(10), detail)
    } else {
        Err(detail)
    }
}

/// Log-density of `vec(Y)` with one factor along `a`, maximized over `σ₀²`.
fn dense_profile(y: &DMatrix<f64>, kmat: &DMatrix<f64>, tau: f64, theta: f64) -> f64 {
    let (k, n) = y.shape();
    let a = [theta.cos(), theta.sin()];
    let m = n * k;
    let cov = DMatrix::from_fn(m, m, |r, c| {
        let (i, j) = (r / k, r % k);
        let (ip, jp) = (c / k, c % k);
        tau * kmat[(i, ip)] * a[j] * a[jp] + if r == c { 1.0 } else { 0.0 }
    });
    let yv = DVector::from_column_slice(y.as_slice());
    let chol = cov.cholesky().expect("positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = yv.dot(&chol.solve(&yv));
    let mf = m as f64;
    let s0 = quad / mf;
    -0.5 * logdet - 0.5 * mf * s0.ln() - 0.5 * mf - 0.5 * mf * (2.0 * std::f64::consts::PI).ln()
}

fn maximize_angle(f: impl Fn(f64) -> f64) -> f64 {
    let steps = 3600;
    let h = std::f64::consts::PI / steps as f64;
    let best = (0..steps)
        .map(|i| i as f64 * h)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut lo, mut hi) = (best - h, best + h);
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    f(0.5 * (lo + hi))
}

fn c2_likelihood_oracle(_: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let y = DMatrix::from_fn(2, 4, |_, _| normal(&mut rng));
    let data = OutputMatrix::on_regular_grid(y.clone()).unwrap();
    let cfg = FitConfig::new(1);
    let pairs = [(0.5, 1.0), (2.0, 2.0), (10.0, 0.7), (1.0, 3.0), (50.0, 1.5)];
    let mut lib = Vec::new();
    let mut dense = Vec::new();
    for &(tau, gamma) in &pairs {
        lib.push(profile_log_likelihood(&data, &[tau], &[vec![gamma]], &cfg).map_err(|e| e.to_string())?);
        let spec = KernelSpec::new(KernelFamily::Matern52, vec![gamma]).unwrap();
        let kmat = kernel_matrix(&spec, data.grid().points());
        dense.push(maximize_angle(|t| dense_profile(&y, &kmat, tau, t)));
    }
    let mut worst = 0.0_f64;
    for i in 1..pairs.len() {
        let dl = lib[i] - lib[0];
        let dd = dense[i] - dense[0];
        worst = worst.max((dl - dd).abs() / dd.abs().max(1.0));
    }
    let detail = format!("max relative difference error {worst:.2e} over {} pairs", pairs.len());
    if worst < 1e-6 {
        within(start, Duration::from_secs(1), detail)
    } else {
        Err(detail)
    }
}

/// Data drawn from the shared-covariance model with varying `(τ, γ)`, and
/// the correlation matrix at the generating range.
fn shared_instance(seed: u64, n: usize) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = rng.random_range(3.0..30.0);
    let tau = [1.0, 10.0, 100.0][(seed % 3) as usize];
    let mut s = Scenario::builtin("example1").unwrap();
    s.n = n;
    s.seed = seed;
    s.range = RangePolicy::Fixed(gamma);
    s.noise = NoiseSpec::Tau(tau);
    let data = simulate_dataset(&s, 0).unwrap();
    let spec = KernelSpec::new(KernelFamily::Matern52, vec![gamma]).unwrap();
    let corr = build_correlation_matrix(&spec, &s.grid()).unwrap();
    (data.y, corr, tau)
}

fn c3_curvilinear_vs_eigen(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for inst in 0..10 {
        let (y, corr, tau) = shared_instance(300 + inst, 50);
        let d = 4;
        let g = g_matrix(&y, &corr, tau).map_err(|e| e.to_string())?;
        let gs = vec![g; d];
        let eigen = estimate_loadings_shared(&y, &corr, tau, d).map_err(|e| e.to_string())?;
        let warm = pca_loadings(&y, d).map_err(|e| e.to_string())?.loadings.into_inner();
        let (a, rep) = optimize_on_stiefel(
            |x| (stiefel_objective(x, &gs).unwrap(), stiefel_gradient(x, &gs).unwrap()),
            &warm,
            &StiefelOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        ctx.record_defect(rep.max_defect);
        worst = worst.max(largest_principal_angle(&a, eigen.values()).map_err(|e| e.to_string())?);
    }
    let detail = format!("max angle {worst:.2e} over 10 instances");
    if worst < 1e-3 {
        within(start, Duration::from_secs(30), detail)
    } else {
        Err(detail)
    }
}

fn c4_gradient(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=8);
        let d = rng.random_range(1..=k.min(4));
        let n = rng.random_range(5..=20);
        let y = DMatrix::from_fn(k, n, |_, _| normal(&mut rng));
        let grid = InputGrid::regular(n);
        let gs: Vec<DMatrix<f64>> = (0..d)
            .map(|_| {
                let corr = build_correlation_matrix(&random_spec(&mut rng, 1), &grid).unwrap();
                g_matrix(&y, &corr, rng.random_range(0.1..50.0)).unwrap()
            })
            .collect();
        let a = sample_uniform_stiefel(k, d, &mut rng).into_inner();
        let grad = stiefel_gradient(&a, &gs).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut fd = DMatrix::zeros(k, d);
        for j in 0..k {
            for l in 0..d {
                let mut ap = a.clone();
                ap[(j, l)] += h;
                let mut am = a.clone();
                am[(j, l)] -= h;
                fd[(j, l)] = (stiefel_objective(&ap, &gs).unwrap() - stiefel_objective(&am, &gs).unwrap())
                    / (2.0 * h);
            }
        }
        worst = worst.max(max_abs(&(&grad - &fd)) / max_abs(&grad).max(1.0));
    }
    check(worst < 1e-5, format!("max relative error {worst:.2e} over 20 instances"))
}

fn c6_pca_reduction(ctx: &Ctx) -> Outcome {
    let s = Scenario::builtin("example1").unwrap();
    let data = simulate_dataset(&s, 0).map_err(|e| e.to_string())?;
    let (k, n) = data.y.shape();
    let d = s.d;
    let pca = pca_loadings(&data.y, d).map_err(|e| e.to_string())?.loadings.into_inner();
    let ident = DMatrix::identity(n, n);

    let closed = estimate_loadings_shared(&data.y, &ident, 3.0, d).map_err(|e| e.to_string())?;
    let a_closed = largest_principal_angle(closed.values(), &pca).map_err(|e| e.to_string())?;

    let gs: Vec<DMatrix<f64>> = [0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&t| g_matrix(&data.y, &ident, t).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let a0 = sample_uniform_stiefel(k, d, &mut rng).into_inner();
    let opts = StiefelOptions {
        grad_tol: 1e-13,
        max_iters: 20_000,
        ..StiefelOptions::default()
    };
    let (a_st, rep) = optimize_on_stiefel(
        |x| (stiefel_objective(x, &gs).unwrap(), stiefel_gradient(x, &gs).unwrap()),
        &a0,
        &opts,
    )
    .map_err(|e| e.to_string())?;
    ctx.record_defect(rep.max_defect);
    let a_stiefel = largest_principal_angle(&a_st, &pca).map_err(|e| e.to_string())?;

    let mut cfg = FitConfig::new(d);
    cfg.fixed_ranges = Some(vec![1e-3]);
    let model = fit(&data.output().map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
    ctx.record_defect(model.report().max_orthonormality_defect);
    let a_fit = largest_principal_angle(model.loadings().values(), &pca).map_err(|e| e.to_string())?;

    let worst = a_closed.max(a_stiefel).max(a_fit);
    check(
        worst < 1e-8,
        format!("angles: closed form {a_closed:.1e}, distinct-τ search {a_stiefel:.1e}, full fit {a_fit:.1e}"),
    )
}

fn paired(report: &gppca::ExperimentReport) -> Vec<(f64, f64)> {
    let gp: Vec<_> = report.records_for(Method::Gppca).collect();
    let pca: Vec<_> = report.records_for(Method::Pca).collect();
    gp.iter()
        .zip(&pca)
        .filter_map(|(g, p)| Some((g.mse?, p.mse?)))
        .collect()
}

fn record_report_defects(ctx: &Ctx, report: &gppca::ExperimentReport) {
    for r in report.records_for(Method::Gppca) {
        if let Some(d) = r.max_defect {
            ctx.record_defect(d);
        }
    }
}

fn c7_example1(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let s = Scenario::builtin("example1").unwrap();
    let report = run_experiment(&s, &[Method::Pca, Method::Gppca]).map_err(|e| e.to_string())?;
    record_report_defects(ctx, &report);
    let g = report.summary(Method::Gppca).unwrap();
    let p = report.summary(Method::Pca).unwrap();
    let wins = paired(&report).iter().filter(|(g, p)| g < p).count();
    let detail = format!(
        "GPPCA AvgMSE {:.2e}, PCA AvgMSE {:.2e}, GPPCA better in {wins}/20, failures {}",
        g.avg_mse,
        p.avg_mse,
        report.failures()
    );
    let ok = (1e-4..=1.5e-3).contains(&g.avg_mse)
        && (2e-3..=2e-2).contains(&p.avg_mse)
        && wins >= 18
        && report.failures() == 0;
    if ok {
        within(start, Duration::from_secs(300), detail)
    } else {
        Err(detail)
    }
}

fn c8_example2(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let s = Scenario::builtin("example2").unwrap();
    let report = run_experiment(&s, &[Method::Pca, Method::Gppca]).map_err(|e| e.to_string())?;
    record_report_defects(ctx, &report);
    let g = report.summary(Method::Gppca).unwrap();
    let p = report.summary(Method::Pca).unwrap();
    let wins = paired(&report).iter().filter(|(g, p)| g < p).count();
    let detail = format!(
        "GPPCA better in {wins}/20 (AvgMSE {:.2e} vs {:.2e}), failures {}",
        g.avg_mse,
        p.avg_mse,
        report.failures()
    );
    if wins >= 17 {
        within(start, Duration::from_secs(600), detail)
    } else {
        Err(detail)
    }
}

fn c9_example4(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let s = Scenario::builtin("example4").unwrap();
    let report = run_experiment(&s, &[Method::Pca, Method::Gppca]).map_err(|e| e.to_string())?;
    record_report_defects(ctx, &report);
    let g = report.summary(Method::Gppca).unwrap();
    let p = report.summary(Method::Pca).unwrap();
    let detail = format!(
        "median angle {:.3} vs {:.3}, AvgMSE {:.2e} vs {:.2e} (GPPCA vs PCA)",
        g.median_angle, p.median_angle, g.avg_mse, p.avg_mse
    );
    if g.median_angle < p.median_angle && g.avg_mse < 0.5 * p.avg_mse {
        within(start, Duration::from_secs(300), detail)
    } else {
        Err(detail)
    }
}

fn c10_coverage(ctx: &Ctx) -> Outcome {
    let mut s = Scenario::builtin("example1").unwrap();
    s.n = 240;
    let grid = s.grid();
    let (mut inside, mut total) = (0usize, 0usize);
    for r in 0..10 {
        let data = simulate_dataset(&s, r).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + r as u64);
        let mut held: Vec<usize> = sample(&mut rng, s.n, 40).into_vec();
        held.sort_unstable();
        let train: Vec<usize> = (0..s.n).filter(|i| held.binary_search(i).is_err()).collect();
        let y_train = DMatrix::from_fn(s.k, train.len(), |j, i| data.y[(j, train[i])]);
        let out = OutputMatrix::new(y_train, grid.select(&train)).map_err(|e| e.to_string())?;
        let model = fit(&out, &gppca_config(&s, r)).map_err(|e| e.to_string())?;
        ctx.record_defect(model.report().max_orthonormality_defect);
        for &i in &held {
            let pred = predict(&model, grid.point(i)).map_err(|e| e.to_string())?;
            let (lo, hi) = pred.interval(gppca::predict::Z_95);
            for j in 0..s.k {
                let v = data.y[(j, i)];
                inside += usize::from(lo[j] <= v && v <= hi[j]);
                total += 1;
            }
        }
    }
    let cov = inside as f64 / total as f64;
    check(
        (0.88..=0.99).contains(&cov),
        format!("pooled 95% coverage {cov:.4} over {total} held-out values"),
    )
}

/// Observation sites of the dense model: training `(input, output)` pairs.
struct DenseModel<'a> {
    a: &'a DMatrix<f64>,
    sig2: Vec<f64>,
    specs: &'a [KernelSpec],
    s0: f64,
}

impl DenseModel<'_> {
    /// Covariance between `y_j(x)` and `y_j'(x')`; `same` marks the same observation.
    fn cov(&self, x: &[f64], j: usize, xp: &[f64], jp: usize, same: bool) -> f64 {
        let mut c = 0.0;
        for (l, spec) in self.specs.iter().enumerate() {
            c += self.a[(j, l)] * self.a[(jp, l)] * self.sig2[l] * kernel_eval(spec, x, xp).unwrap();
        }
        if same {
            c += self.s0;
        }
        c
    }
}

/// Universal kriging of the unobserved outputs at `xstar` from all training
/// values plus `observed` outputs at `xstar`, with a flat prior on the mean
/// coefficients of the basis rows `hfun`.
#[allow(clippy::too_many_arguments)]
fn dense_kriging(
    dm: &DenseModel,
    pts: &[Vec<f64>],
    y: &DMatrix<f64>,
    hfun: &dyn Fn(&[f64]) -> Vec<f64>,
    q: usize,
    xstar: &[f64],
    observed: &[(usize, f64)],
) -> (DVector<f64>, DMatrix<f64>) {
    let k = y.nrows();
    let mut sites: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut w = Vec::new();
    for (i, x) in pts.iter().enumerate() {
        for j in 0..k {
            sites.push((x.clone(), j));
            w.push(y[(j, i)]);
        }
    }
    for &(j, v) in observed {
        sites.push((xstar.to_vec(), j));
        w.push(v);
    }
    let targets: Vec<usize> = (0..k).filter(|j| !observed.iter().any(|o| o.0 == *j)).collect();
    let m = sites.len();
    let t = targets.len();
    let s_oo = DMatrix::from_fn(m, m, |r, c| dm.cov(&sites[r].0, sites[r].1, &sites[c].0, sites[c].1, r == c));
    let s_ot = DMatrix::from_fn(m, t, |r, c| dm.cov(&sites[r].0, sites[r].1, xstar, targets[c], false));
    let s_tt = DMatrix::from_fn(t, t, |r, c| dm.cov(xstar, targets[r], xstar, targets[c], r == c));
    let w = DVector::from_vec(w);
    let inv = inverse(&s_oo);
    let mut mean = s_ot.transpose() * &inv * &w;
    let mut cov = &s_tt - s_ot.transpose() * &inv * &s_ot;
    if q > 0 {
        let f_rows = |x: &[f64], j: usize| {
            let h = hfun(x);
            let mut row = vec![0.0; q * k];
            row[j * q..(j + 1) * q].copy_from_slice(&h);
            row
        };
        let fo = DMatrix::from_fn(m, q * k, |r, c| f_rows(&sites[r].0, sites[r].1)[c]);
        let ft = DMatrix::from_fn(t, q * k, |r, c| f_rows(xstar, targets[r])[c]);
        let gram_inv = inverse(&(fo.transpose() * &inv * &fo));
        let beta = &gram_inv * fo.transpose() * &inv * &w;
        mean = &ft * &beta + s_ot.transpose() * &inv * (&w - &fo * &beta);
        let r = ft.transpose() - fo.transpose() * &inv * &s_ot;
        cov += r.transpose() * gram_inv * r;
    }
    (mean, cov)
}

fn c11_conditioning(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = 0.0_f64;
    for inst in 0..20 {
        let (q, p) = [(0, 1), (0, 2), (1, 2), (2, 1)][inst % 4];
        let k = rng.random_range(2..=4);
        let d = rng.random_range(1..=(k - 1).min(2));
        let n = rng.random_range(q + 3..=8);
        let grid = random_grid(&mut rng, n, p);
        let specs: Vec<KernelSpec> = (0..d).map(|_| random_spec(&mut rng, p)).collect();
        let taus: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..20.0)).collect();
        let s0 = rng.random_range(0.1..2.0);
        let a = sample_uniform_stiefel(k, d, &mut rng);
        let y = DMatrix::from_fn(k, n, |_, _| normal(&mut rng));
        let basis = match q {
            0 => MeanBasis::none(),
            1 => MeanBasis::intercept(),
            _ => MeanBasis {
                intercept: true,
                linear_input: true,
                covariate_columns: Vec::new(),
            },
        };
        let design = build_mean_design(&basis, &grid, None).map_err(|e| e.to_string())?;
        let hyper = HyperParams {
            sigma0_sq: s0,
            taus: taus.clone(),
            kernels: specs.clone(),
            shared_covariance: false,
            fixed_noise: None,
        };
        let report = FitReport {
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
            evaluations: 0,
            max_orthonormality_defect: 0.0,
        };
        let model = FittedModel::from_parts(
            OutputMatrix::new(y.clone(), grid.clone()).unwrap(),
            LoadingMatrix::new(a.values().clone()).unwrap(),
            hyper,
            design,
            report,
        )
        .map_err(|e| e.to_string())?;
        let dm = DenseModel {
            a: a.values(),
            sig2: taus.iter().map(|t| t * s0).collect(),
            specs: &specs,
            s0,
        };
        let hfun = |x: &[f64]| -> Vec<f64> {
            match q {
                0 => vec![],
                1 => vec![1.0],
                _ => vec![1.0, x[0]],
            }
        };
        let xstar: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..3.0)).collect();

        let lib = if q == 0 { predict(&model, &xstar) } else { predict_with_mean(&model, &xstar, &[]) }
            .map_err(|e| e.to_string())?;
        let (om, oc) = dense_kriging(&dm, grid.points(), &y, &hfun, q, &xstar, &[]);
        worst = worst
            .max((&lib.mean - &om).amax())
            .max(max_abs(&(&lib.covariance - &oc)));

        let obs_count = rng.random_range(1..k);
        let mut rows: Vec<usize> = sample(&mut rng, k, obs_count).into_vec();
        rows.sort_unstable();
        let vals: Vec<f64> = rows.iter().map(|_| normal(&mut rng)).collect();
        let cond = conditional_predict(&model, &xstar, &[], &rows, &DVector::from_vec(vals.clone()))
            .map_err(|e| e.to_string())?;
        let obs: Vec<(usize, f64)> = rows.iter().copied().zip(vals).collect();
        let (cm, cc) = dense_kriging(&dm, grid.points(), &y, &hfun, q, &xstar, &obs);
        worst = worst
            .max((&cond.mean - &cm).amax())
            .max(max_abs(&(&cond.covariance - &cc)));
    }
    check(worst < 1e-6, format!("max deviation from dense kriging {worst:.2e} over 20 instances"))
}

fn c12_projection_identity(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let (n, q) = (7, 2);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let h = DMatrix::from_fn(n, q, |_, _| normal(&mut rng));
        let grid = random_grid(&mut rng, n, 1);
        let sigma = kernel_matrix(&random_spec(&mut rng, 1), grid.points()) * rng.random_range(0.2..5.0);
        let s0 = rng.random_range(0.1..3.0);
        let hth_inv = inverse(&(h.transpose() * &h));
        let eye = DMatrix::<f64>::identity(n, n);
        let mt = (&eye - &h * &hth_inv * h.transpose()) / s0;
        let lhs = &hth_inv * h.transpose() * (&eye - &sigma * inverse(&(&mt * &sigma + &eye)) * &mt);
        let st_inv = inverse(&(&sigma + &eye * s0));
        let rhs = inverse(&(h.transpose() * &st_inv * &h)) * h.transpose() * &st_inv;
        worst = worst.max(max_abs(&(lhs - rhs)));
    }
    check(worst < 1e-8, format!("max deviation {worst:.2e} over 20 instances"))
}

fn c13_determinism(_: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |sub: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(sub).join("report.csv");
        let status = Command::new(env!("CARGO_BIN_EXE_gppca"))
            .args(["benchmark", "--scenario", "example1", "--methods", "pca,gppca,ly1,ly5"])
            .args(["--replicates", "3", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("benchmark exited with {}", status.status));
        }
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        Ok((read(&out)?, read(&out.with_file_name("report_replicates.csv"))?))
    };
    let first = run("a")?;
    let second = run("b")?;
    check(
        first == second && !first.0.is_empty(),
        format!(
            "summary {} bytes, replicates {} bytes, identical: {}",
            first.0.len(),
            first.1.len(),
            first == second
        ),
    )
}

fn c5_feasibility(ctx: &Ctx) -> Outcome {
    let worst = ctx.max_defect.get();
    let runs = ctx.optimizer_runs.get();
    check(
        runs > 0 && worst < 1e-10,
        format!("max orthonormality defect {worst:.2e} across {runs} optimizer runs"),
    )
}

type Criterion = (u32, &'static str, fn(&Ctx) -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        (1, "closed-form joint precision inverts the covariance", c1_precision_identity),
        (2, "profile likelihood differences match the dense density", c2_likelihood_oracle),
        (3, "curvilinear search matches the eigen solution", c3_curvilinear_vs_eigen),
        (4, "objective gradient matches finite differences", c4_gradient),
        (6, "identity correlation reduces to PCA", c6_pca_reduction),
        (7, "example1 error bands", c7_example1),
        (8, "example2 per-replicate improvement", c8_example2),
        (9, "example4 deterministic factors", c9_example4),
        (10, "held-out predictive coverage", c10_coverage),
        (11, "prediction and conditioning match dense kriging", c11_conditioning),
        (12, "GLS projection identity", c12_projection_identity),
        (13, "benchmark CLI is deterministic", c13_determinism),
        (5, "loadings stay orthonormal in every optimizer run", c5_feasibility),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx {
        max_defect: Cell::new(0.0),
        optimizer_runs: Cell::new(0),
    };
    let mut results = Vec::new();
    for (id, label, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&ctx)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} [{tag}] {label}: {detail} ({secs:.2}s)");
        results.push((id, outcome.is_ok()));
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
