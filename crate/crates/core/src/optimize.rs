//! Dense BFGS with a backtracking line search that interpolates with cubics.
//!
//! Problems here have the dimension of one output vector, so a dense inverse
//! Hessian approximation is cheap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOpts {
    pub max_iters: usize,
    /// Converged when the gradient norm drops below this.
    pub gtol: f64,
    /// Converged when the relative objective change drops below this.
    pub ftol: f64,
    /// Extra starts from the next-nearest training outputs.
    pub restarts: usize,
    pub max_line_search: usize,
}

impl Default for OptimizerOpts {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gtol: 1e-6,
            ftol: 1e-9,
            restarts: 4,
            max_line_search: 40,
        }
    }
}

impl OptimizerOpts {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.gtol >= 0.0 && self.ftol >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// Evaluation errors during a line search (for instance a barrier violation)
/// are treated as an infinite objective and the step is shortened. An error at
/// the starting point is returned as is.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &OptimizerOpts) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut gx) = f(&x0)?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(Error::OptimizationFailure(format!(
            "objective is not finite at the starting point ({fx})"
        )));
    }
    let mut x = x0;
    // Inverse Hessian approximation, row-major.
    let mut h = identity(n);
    let mut first_step = true;

    for iter in 0..opts.max_iters {
        let gnorm = norm(&gx);
        if gnorm < opts.gtol {
            return Ok(Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            });
        }

        let mut dir = mat_vec(&h, &gx, n);
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&gx, &dir);
        if !(slope < 0.0) {
            // Approximation lost positive definiteness; fall back to steepest descent.
            h = identity(n);
            dir = gx.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }
        let initial = if first_step {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        first_step = false;

        let Some((step, f_new, g_new)) = line_search(&mut f, &x, fx, slope, &dir, initial, opts)
        else {
            return Ok(Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: false,
            });
        };

        let s: Vec<f64> = dir.iter().map(|d| step * d).collect();
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let yk: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yk);
        if sy > 1e-12 * norm(&s) * norm(&yk) && sy > 0.0 {
            bfgs_update(&mut h, &s, &yk, sy, n);
        }

        let f_old = fx;
        x = x_new;
        fx = f_new;
        gx = g_new;

        let scale = f_old.abs().max(fx.abs()).max(f64::MIN_POSITIVE);
        if (f_old - fx).abs() / scale < opts.ftol {
            return Ok(Minimum {
                grad_norm: norm(&gx),
                x,
                value: fx,
                iterations: iter + 1,
                converged: true,
            });
        }
    }
    let grad_norm = norm(&gx);
    Ok(Minimum {
        converged: grad_norm < opts.gtol,
        x,
        value: fx,
        grad_norm,
        iterations: opts.max_iters,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// `H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Backtracking until the Armijo condition holds. Trial steps come from a
/// quadratic model on the first reduction and cubic models afterwards,
/// safeguarded to `[0.1, 0.5]` of the previous step.
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    slope: f64,
    dir: &[f64],
    initial: f64,
    opts: &OptimizerOpts,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut step = initial;
    let mut prev: Option<(f64, f64)> = None;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..opts.max_line_search {
        for ((t, xi), d) in trial.iter_mut().zip(x).zip(dir) {
            *t = xi + step * d;
        }
        let evaluated = f(&trial)
            .ok()
            .filter(|(v, g)| v.is_finite() && g.iter().all(|gi| gi.is_finite()));
        match evaluated {
            Some((value, grad)) if value <= f0 + ARMIJO_C1 * step * slope => {
                return Some((step, value, grad));
            }
            Some((value, _)) => {
                let next = match prev {
                    None => quadratic_step(f0, slope, step, value),
                    Some((p_step, p_value)) => cubic_step(f0, slope, step, value, p_step, p_value),
                };
                prev = Some((step, value));
                step = next.clamp(0.1 * step, 0.5 * step);
            }
            None => {
                prev = None;
                step *= 0.1;
            }
        }
        if step < 1e-20 {
            break;
        }
    }
    None
}

fn quadratic_step(f0: f64, slope: f64, step: f64, value: f64) -> f64 {
    let denom = 2.0 * (value - f0 - slope * step);
    if denom > 0.0 {
        -slope * step * step / denom
    } else {
        0.5 * step
    }
}

fn cubic_step(f0: f64, slope: f64, a1: f64, f1: f64, a0: f64, f_prev: f64) -> f64 {
    let r1 = f1 - f0 - slope * a1;
    let r0 = f_prev - f0 - slope * a0;
    let d = a1 - a0;
    let a = (r1 / (a1 * a1) - r0 / (a0 * a0)) / d;
    let b = (-a0 * r1 / (a1 * a1) + a1 * r0 / (a0 * a0)) / d;
    if a.abs() < 1e-300 {
        return -slope / (2.0 * b);
    }
    let disc = b * b - 3.0 * a * slope;
    if disc < 0.0 {
        return 0.5 * a1;
    }
    if b <= 0.0 {
        (-b + disc.sqrt()) / (3.0 * a)
    } else {
        -slope / (b + disc.sqrt())
    }
}
