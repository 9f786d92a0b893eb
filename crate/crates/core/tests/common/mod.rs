#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use twinkern::data::Stream;
use twinkern::{kernel_matrix, CMatrix, KernelMatrix, KernelParams};

pub fn uniform_in(s: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * s.uniform()
}

pub fn random_points(s: &mut Stream, m: usize, p: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, p, |_, _| uniform_in(s, -scale, scale))
}

pub fn rbf_gram(s: &mut Stream, m: usize, p: usize, gamma: f64) -> KernelMatrix {
    let x = random_points(s, m, p, 1.0);
    kernel_matrix(&x, &KernelParams::rbf(gamma).unwrap()).unwrap()
}

/// Cosine kernel of random vectors in `dim` dimensions.
pub fn cosine_gram(s: &mut Stream, m: usize, dim: usize) -> KernelMatrix {
    let x = DMatrix::from_fn(m, dim, |_, _| s.normal());
    kernel_matrix(&x, &KernelParams::linear(1.0).unwrap()).unwrap()
}

/// `A A^T` for a random `m x r` matrix.
pub fn random_psd(s: &mut Stream, m: usize, r: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, r, |_, _| s.normal());
    &a * a.transpose()
}

pub fn centering(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64)
}

/// `(m-1)^-2 tr(K H G H)` with an explicit centering matrix.
pub fn dense_hsic(k: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let m = k.nrows();
    let h = centering(m);
    (k * &h * g * &h).trace() / ((m - 1) * (m - 1)) as f64
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|d| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[d] += step;
            down[d] -= step;
            (f(&up) - f(&down)) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|b|, floor)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

pub fn permutation(s: &mut Stream, m: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    s.shuffle(&mut p);
    p
}

pub fn permute(a: &DMatrix<f64>, p: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(p[i], p[j])])
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// Random non-negative C with a zero first row and column.
pub fn random_c(s: &mut Stream, rows: usize, cols: usize) -> CMatrix {
    let sparse = s.uniform() < 0.3;
    CMatrix::new(DMatrix::from_fn(rows, cols, |i, j| {
        if i == 0 || j == 0 || (sparse && s.uniform() < 0.4) {
            0.0
        } else {
            s.uniform()
        }
    }))
    .unwrap()
}

pub fn bilinear(c: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    DVector::from_column_slice(a).dot(&(c * DVector::from_column_slice(b)))
}

pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Alternating projected power iteration for `max a^T C b` over non-negative
/// unit vectors, best of `starts` random non-negative starts.
pub fn power_iteration(c: &DMatrix<f64>, s: &mut Stream, starts: usize) -> f64 {
    let mut best = 0.0f64;
    for _ in 0..starts {
        let mut b = unit((0..c.ncols()).map(|_| s.uniform()).collect());
        let mut value = 0.0;
        for _ in 0..5000 {
            let cb = c * DVector::from_column_slice(&b);
            let a: Vec<f64> = cb.iter().map(|x| x.max(0.0)).collect();
            if a.iter().all(|&x| x == 0.0) {
                break;
            }
            let a = unit(a);
            let cta = c.transpose() * DVector::from_column_slice(&a);
            let next: Vec<f64> = cta.iter().map(|x| x.max(0.0)).collect();
            if next.iter().all(|&x| x == 0.0) {
                break;
            }
            b = unit(next);
            let v = bilinear(c, &a, &b);
            if (v - value).abs() <= 1e-15 * v.abs() {
                value = v;
                break;
            }
            value = v;
        }
        best = best.max(value);
    }
    best
}
