//! Box-constrained BFGS for the covariance hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};

/// A smooth function to minimize.
///
/// `gradient(x)` is only ever called right after `value(x)` at the same point.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when an accepted step changes the objective by at most `rel_tol · max(1, |f|)`.
    pub rel_tol: f64,
    /// Largest change of any coordinate in one step.
    pub max_step: f64,
    pub armijo_c: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-8,
            max_step: 2.0,
            armijo_c: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 40;

fn clamp(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| v.clamp(*l, *h))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient with components that push against an active bound removed.
fn projected(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect()
}

/// Minimizes `obj` over the box `[lower, upper]` from `x0`.
///
/// Returns the best point found; `converged` is false when the iteration
/// budget ran out or the line search stalled away from a stationary point.
pub fn minimize_bfgs<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &BfgsOptions,
) -> Result<BfgsReport> {
    let m = x0.len();
    if lower.len() != m || upper.len() != m || lower.iter().zip(upper).any(|(l, h)| l > h) {
        return Err(GppcaError::arg("inconsistent optimization bounds"));
    }
    let mut x = clamp(x0, lower, upper);
    let mut f = obj.value(&x)?;
    let mut evaluations = 1;
    if !f.is_finite() {
        return Err(GppcaError::numeric(format!(
            "objective is not finite at the starting point {x:?}"
        )));
    }
    let mut g = obj.gradient(&x)?;
    // inverse Hessian approximation, row-major m×m
    let mut hinv = vec![0.0; m * m];
    let reset = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            h[i * m + i] = scale;
        }
    };
    reset(&mut hinv, 1.0);
    let mut first_update = true;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let pg = projected(&x, &g, lower, upper);
        if pg.iter().all(|v| v.abs() <= 1e-12 * f.abs().max(1.0)) {
            converged = true;
            break;
        }
        let mut p: Vec<f64> = (0..m).map(|i| -dot(&hinv[i * m..(i + 1) * m], &g)).collect();
        // drop components that would leave the box through an active bound
        for i in 0..m {
            if (x[i] <= lower[i] && p[i] < 0.0) || (x[i] >= upper[i] && p[i] > 0.0) {
                p[i] = 0.0;
            }
        }
        if dot(&p, &g) >= 0.0 {
            reset(&mut hinv, 1.0);
            first_update = true;
            p = pg.iter().map(|v| -v).collect();
        }
        let longest = p.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if longest > opts.max_step {
            p.iter_mut().for_each(|v| *v *= opts.max_step / longest);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = clamp(
                &x.iter().zip(&p).map(|(a, b)| a + t * b).collect::<Vec<_>>(),
                lower,
                upper,
            );
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            evaluations += 1;
            let ft = obj.value(&trial).unwrap_or(f64::INFINITY);
            if ft.is_finite() && ft <= f + opts.armijo_c * dot(&g, &step) {
                accepted = Some((trial, ft, step));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, s)) = accepted else {
            // re-establish the state of the incumbent for the caller
            obj.value(&x)?;
            let pg_norm = pg.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
            converged = pg_norm <= 1e-3 * f.abs().max(1.0);
            break;
        };
        let g_new = obj.gradient(&x_new)?;
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if first_update {
                reset(&mut hinv, sy / dot(&yv, &yv));
                first_update = false;
            }
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..m).map(|i| dot(&hinv[i * m..(i + 1) * m], &yv)).collect();
            let yhy = dot(&yv, &hy);
            for i in 0..m {
                for j in 0..m {
                    hinv[i * m + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let change = (f - f_new).abs();
        x = x_new;
        f = f_new;
        g = g_new;
        if change <= opts.rel_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    Ok(BfgsReport {
        x,
        value: f,
        iterations,
        evaluations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }

        fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        }
    }

    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok(x.iter().zip(&self.0).map(|(a, c)| (a - c).powi(2)).sum::<f64>() + 1.0)
        }

        fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(x.iter().zip(&self.0).map(|(a, c)| 2.0 * (a - c)).collect())
        }
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let opts = BfgsOptions {
            max_iters: 500,
            rel_tol: 1e-14,
            ..BfgsOptions::default()
        };
        let rep = minimize_bfgs(&mut Rosenbrock, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &opts).unwrap();
        assert!((rep.x[0] - 1.0).abs() < 1e-4 && (rep.x[1] - 1.0).abs() < 1e-4, "{rep:?}");
    }

    #[test]
    fn respects_bounds() {
        let mut q = Quadratic(vec![3.0, -3.0]);
        let rep = minimize_bfgs(&mut q, &[0.0, 0.0], &[-1.0, -1.0], &[1.0, 1.0], &BfgsOptions::default())
            .unwrap();
        assert!((rep.x[0] - 1.0).abs() < 1e-12 && (rep.x[1] + 1.0).abs() < 1e-12, "{rep:?}");
        assert!(rep.converged);
    }

    #[test]
    fn non_finite_start_is_numeric_error() {
        struct Bad;
        impl Objective for Bad {
            fn value(&mut self, _: &[f64]) -> Result<f64> {
                Ok(f64::NAN)
            }
            fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(x.to_vec())
            }
        }
        let res = minimize_bfgs(&mut Bad, &[0.0], &[-1.0], &[1.0], &BfgsOptions::default());
        assert!(matches!(res, Err(GppcaError::Numeric(_))));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let opts = BfgsOptions {
            max_iters: 2,
            rel_tol: 0.0,
            ..BfgsOptions::default()
        };
        let rep = minimize_bfgs(&mut Rosenbrock, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &opts).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
    }
}
