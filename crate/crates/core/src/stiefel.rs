//! Feasible curvilinear search on the Stiefel manifold `{A : AᵀA = I}`.
//!
//! Iterates move along the Cayley curve
//! `A(t) = (I + t/2·W)⁻¹ (I − t/2·W) A` with the skew matrix
//! `W = ∇φ Aᵀ − A ∇φᵀ` built from the Euclidean gradient of the minimized
//! function `φ = −F`. Every point on the curve has orthonormal columns, so
//! feasibility holds without projection. Step sizes come from alternating
//! Barzilai–Borwein formulas, safeguarded by a monotone Armijo backtrack.
//!
//! When `2d < k` the `k×k` solve is replaced by a `2d×2d` one through the
//! Sherman–Morrison–Woodbury identity, since `W = U Vᵀ` with
//! `U = [∇φ, A]`, `V = [A, −∇φ]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::linalg::{lu_solve, orthonormality_defect, orthonormalize};

/// Re-orthonormalize an accepted iterate once rounding pushes it this far off the manifold.
const REORTHO_THRESHOLD: f64 = 1e-12;
const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e20;
const MAX_BACKTRACKS: usize = 60;
/// Relative size of rounding noise in objective values.
const ROUNDING: f64 = 64.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StiefelOptions {
    pub max_iters: usize,
    /// Stop once `‖∇φ − A∇φᵀA‖_F ≤ grad_tol · max(1, |F(A)|)`.
    pub grad_tol: f64,
    pub initial_step: f64,
    /// Backtracking shrink factor.
    pub armijo_rho: f64,
    /// Sufficient-increase constant.
    pub armijo_c: f64,
    pub bb_steps: bool,
}

impl Default for StiefelOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            initial_step: 1e-3,
            armijo_rho: 0.5,
            armijo_c: 1e-4,
            bb_steps: true,
        }
    }
}

impl StiefelOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.grad_tol > 0.0
            && self.initial_step > 0.0
            && self.armijo_rho > 0.0
            && self.armijo_rho < 1.0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0;
        if ok {
            Ok(())
        } else {
            Err(GppcaError::arg(format!("invalid Stiefel optimizer options: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub objective: f64,
    /// Largest `‖AᵀA − I‖_max` seen over accepted iterates.
    pub max_defect: f64,
    /// Objective value after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Moves `a` a distance `step` along the Cayley curve generated by the skew matrix `w`.
pub fn cayley_retraction(a: &DMatrix<f64>, w: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if w.nrows() != k || w.ncols() != k {
        return Err(GppcaError::arg(format!(
            "skew matrix must be {k}x{k}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let skew_err = (w + w.transpose()).amax();
    if skew_err > 1e-12 * w.amax().max(1.0) {
        return Err(GppcaError::arg(format!(
            "matrix is not skew-symmetric (‖W + Wᵀ‖_max = {skew_err:.3e})"
        )));
    }
    if step == 0.0 {
        return Ok(a.clone());
    }
    let eye = DMatrix::<f64>::identity(k, k);
    let lhs = &eye + w * (0.5 * step);
    let rhs = (&eye - w * (0.5 * step)) * a;
    lu_solve(&lhs, &rhs).ok_or_else(|| {
        GppcaError::numeric("I + (t/2)W is singular; reduce the step and retry")
    })
}

/// The Cayley curve through `a` for a fixed descent gradient, evaluated at
/// arbitrary step lengths.
struct CayleyCurve<'a> {
    a: &'a DMatrix<f64>,
    low_rank: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
    w: Option<DMatrix<f64>>,
}

impl<'a> CayleyCurve<'a> {
    fn new(a: &'a DMatrix<f64>, grad_phi: &DMatrix<f64>) -> Self {
        let (k, d) = a.shape();
        if 2 * d < k {
            let mut u = DMatrix::zeros(k, 2 * d);
            u.columns_mut(0, d).copy_from(grad_phi);
            u.columns_mut(d, d).copy_from(a);
            let mut v = DMatrix::zeros(k, 2 * d);
            v.columns_mut(0, d).copy_from(a);
            v.columns_mut(d, d).copy_from(&(-grad_phi));
            let vtu = v.transpose() * &u;
            let vta = v.transpose() * a;
            Self {
                a,
                low_rank: Some((u, vtu, vta)),
                w: None,
            }
        } else {
            let w = grad_phi * a.transpose() - a * grad_phi.transpose();
            Self {
                a,
                low_rank: None,
                w: Some(w),
            }
        }
    }

    fn at(&self, t: f64) -> Option<DMatrix<f64>> {
        if let Some((u, vtu, vta)) = &self.low_rank {
            // A(t) = A − t U (I + t/2 VᵀU)⁻¹ VᵀA
            let m = vtu.nrows();
            let lhs = DMatrix::<f64>::identity(m, m) + vtu * (0.5 * t);
            let inner = lu_solve(&lhs, vta)?;
            Some(self.a - u * inner * t)
        } else {
            let w = self.w.as_ref().expect("dense curve has W");
            cayley_retraction(self.a, w, t).ok()
        }
    }
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Maximizes `F` over the Stiefel manifold starting from the feasible point `a0`.
///
/// `eval` returns `(F(A), ∇F(A))` with the Euclidean gradient.
pub fn optimize_on_stiefel<F>(
    mut eval: F,
    a0: &DMatrix<f64>,
    opts: &StiefelOptions,
) -> Result<(DMatrix<f64>, StiefelReport)>
where
    F: FnMut(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    opts.validate()?;
    let (k, d) = a0.shape();
    if d == 0 || d > k {
        return Err(GppcaError::arg(format!("invalid Stiefel point shape {k}x{d}")));
    }
    let defect0 = orthonormality_defect(a0);
    if defect0 > 1e-10 {
        return Err(GppcaError::arg(format!(
            "initial point is not on the Stiefel manifold (defect {defect0:.3e})"
        )));
    }

    let mut a = a0.clone();
    let (mut f, mut g) = eval(&a);
    check_finite(f, &g, 0)?;
    let mut report = StiefelReport {
        iterations: 0,
        grad_norm: f64::INFINITY,
        converged: false,
        objective: f,
        max_defect: defect0,
        trace: vec![f],
    };

    let mut step = opts.initial_step;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    for iter in 0..opts.max_iters {
        // descent quantities for φ = −F
        let grad_phi = -&g;
        let riem = &grad_phi - &a * grad_phi.transpose() * &a;
        let grad_norm = riem.norm();
        report.grad_norm = grad_norm;
        if grad_norm <= opts.grad_tol * f.abs().max(1.0) {
            report.converged = true;
            break;
        }

        // curve velocity A'(0) = −W A
        let wa = &grad_phi * (a.transpose() * &a) - &a * (grad_phi.transpose() * &a);
        // φ'(0) = −⟨∇φ, WA⟩ = −(½‖X − Xᵀ‖² + ‖∇φ − AX‖²) with X = Aᵀ∇φ,
        // a sum of squares that keeps its accuracy as the gradient vanishes
        let x = a.transpose() * &grad_phi;
        let slope = -(0.5 * (&x - x.transpose()).norm_squared() + (&grad_phi - &a * &x).norm_squared());
        if slope >= 0.0 {
            // no descent available numerically
            report.converged = true;
            break;
        }

        if opts.bb_steps {
            if let Some((prev_a, prev_wa)) = &prev {
                let s = &a - prev_a;
                let y = &wa - prev_wa;
                let sy = dot(&s, &y).abs();
                let candidate = if iter % 2 == 1 {
                    dot(&s, &s) / sy
                } else {
                    sy / dot(&y, &y)
                };
                if candidate.is_finite() && candidate > 0.0 {
                    step = candidate.clamp(MIN_STEP, MAX_STEP);
                }
            }
        }

        let curve = CayleyCurve::new(&a, &grad_phi);
        let mut t = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            if let Some(cand) = curve.at(t) {
                let (fc, gc) = eval(&cand);
                // φ(A(t)) ≤ φ(A) + c·t·φ'(0)  ⇔  F(A(t)) ≥ F(A) − c·t·φ'(0)
                let armijo = fc >= f - opts.armijo_c * t * slope;
                // close to a maximizer changes in F drown in rounding; then
                // progress is measured by the Riemannian gradient instead
                let flat = fc >= f - ROUNDING * f.abs().max(1.0)
                    && riemannian_norm(&cand, &gc) < grad_norm;
                if fc.is_finite() && (armijo || flat) {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= opts.armijo_rho;
            if t < MIN_STEP {
                break;
            }
        }
        let Some((mut cand, fc, gc)) = accepted else {
            break;
        };
        check_finite(fc, &gc, iter + 1)?;

        let mut defect = orthonormality_defect(&cand);
        let (mut fc, mut gc) = (fc, gc);
        if defect > REORTHO_THRESHOLD {
            cand = orthonormalize(&cand);
            defect = orthonormality_defect(&cand);
            let (f2, g2) = eval(&cand);
            fc = f2;
            gc = g2;
        }
        report.max_defect = report.max_defect.max(defect);

        prev = Some((a, wa));
        step = t;
        a = cand;
        f = fc;
        g = gc;
        report.iterations = iter + 1;
        report.trace.push(f);
    }

    if !report.converged {
        let grad_phi = -&g;
        let riem = &grad_phi - &a * grad_phi.transpose() * &a;
        report.grad_norm = riem.norm();
        report.converged = report.grad_norm <= opts.grad_tol * f.abs().max(1.0);
    }
    report.objective = f;
    Ok((a, report))
}

fn riemannian_norm(a: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    (g - a * g.transpose() * a).norm()
}

fn check_finite(f: f64, g: &DMatrix<f64>, iter: usize) -> Result<()> {
    if f.is_finite() && g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GppcaError::numeric(format!(
            "Stiefel objective or gradient is non-finite at iteration {iter} (F = {f})"
        )))
    }
}

/// Runs [`optimize_on_stiefel`] from every start and keeps the best objective.
pub fn optimize_multi_start<F>(
    mut eval: F,
    starts: &[DMatrix<f64>],
    opts: &StiefelOptions,
) -> Result<(DMatrix<f64>, StiefelReport)>
where
    F: FnMut(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    let mut best: Option<(DMatrix<f64>, StiefelReport)> = None;
    for start in starts {
        let (a, rep) = optimize_on_stiefel(&mut eval, start, opts)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| rep.objective > b.objective);
        if better {
            best = Some((a, rep));
        }
    }
    best.ok_or_else(|| GppcaError::arg("no starting points supplied"))
}
