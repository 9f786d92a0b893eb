//! Monomial and Gegenbauer polynomial bases, applied element-wise to kernel
//! matrices.
//!
//! Gegenbauer polynomials are evaluated by the forward three-term recurrence
//!
//! ```text
//! G_0(t) = 1,  G_1(t) = 2 w t,
//! G_{i+1}(t) = 2(w + i)/(i + 1) t G_i(t) - (2w + i - 1)/(i + 1) G_{i-1}(t)
//! ```
//!
//! where `w > -1/2` is the weight parameter, and their derivatives by the
//! recurrence obtained from differentiating it. The weight parameter is not
//! the RBF bandwidth even though both are often written as gamma.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelMatrix;

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 64;

/// Degrees above this log a warning; the objective saturates well before.
pub const WARN_DEGREE: usize = 30;

/// Arguments this far outside `[-1, 1]` are clamped instead of rejected.
pub const DOMAIN_TOL: f64 = 1e-9;

/// Tolerance on the unit norm of transform coefficients.
pub const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Monomial,
    Gegenbauer,
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisKind::Monomial => f.write_str("monomial"),
            BasisKind::Gegenbauer => f.write_str("gegenbauer"),
        }
    }
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "monomial" => Ok(BasisKind::Monomial),
            "gegenbauer" => Ok(BasisKind::Gegenbauer),
            other => Err(Error::Config(format!("unknown basis '{other}'"))),
        }
    }
}

/// Polynomial basis choice. `weight_param` is only meaningful for Gegenbauer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub weight_param: f64,
}

impl BasisSpec {
    pub fn monomial() -> Self {
        Self {
            kind: BasisKind::Monomial,
            weight_param: 0.0,
        }
    }

    pub fn gegenbauer(weight_param: f64) -> Result<Self> {
        let spec = Self {
            kind: BasisKind::Gegenbauer,
            weight_param,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BasisKind::Gegenbauer && !(self.weight_param > -0.5) {
            return Err(Error::InvalidWeightParam(self.weight_param));
        }
        Ok(())
    }

    /// Writes the basis functions of degree `0..out.len()` at `t` into `out`.
    /// Gegenbauer arguments are clamped to `[-1, 1]`.
    pub fn values_into(&self, t: f64, out: &mut [f64]) {
        match self.kind {
            BasisKind::Monomial => {
                let mut p = 1.0;
                for v in out.iter_mut() {
                    *v = p;
                    p *= t;
                }
            }
            BasisKind::Gegenbauer => {
                gegenbauer_recurrence(self.weight_param, t.clamp(-1.0, 1.0), out, None)
            }
        }
    }
}

fn check_domain(t: f64) -> Result<f64> {
    if !t.is_finite() || t.abs() > 1.0 + DOMAIN_TOL {
        return Err(Error::Domain(format!("argument {t} lies outside [-1, 1]")));
    }
    Ok(t.clamp(-1.0, 1.0))
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::DegreeTooLarge(degree));
    }
    if degree > WARN_DEGREE {
        warn!("polynomial degree {degree} is above {WARN_DEGREE}; expect numerical saturation");
    }
    Ok(())
}

/// Fills `values[i] = G_i(t)` and optionally `derivs[i] = G_i'(t)` for every
/// `i < values.len()`.
fn gegenbauer_recurrence(w: f64, t: f64, values: &mut [f64], mut derivs: Option<&mut [f64]>) {
    let n = values.len();
    if n == 0 {
        return;
    }
    values[0] = 1.0;
    if let Some(d) = derivs.as_deref_mut() {
        d[0] = 0.0;
    }
    if n == 1 {
        return;
    }
    values[1] = 2.0 * w * t;
    if let Some(d) = derivs.as_deref_mut() {
        d[1] = 2.0 * w;
    }
    for i in 1..n - 1 {
        let fi = i as f64;
        let a = 2.0 * (w + fi) / (fi + 1.0);
        let b = (2.0 * w + fi - 1.0) / (fi + 1.0);
        values[i + 1] = a * t * values[i] - b * values[i - 1];
        if let Some(d) = derivs.as_deref_mut() {
            d[i + 1] = a * (t * d[i] + values[i]) - b * d[i - 1];
        }
    }
}

/// `G_degree(t)` for weight parameter `gamma`.
pub fn gegenbauer_eval(degree: usize, gamma: f64, t: f64) -> Result<f64> {
    BasisSpec::gegenbauer(gamma)?;
    let t = check_domain(t)?;
    let mut values = vec![0.0; degree + 1];
    gegenbauer_recurrence(gamma, t, &mut values, None);
    Ok(values[degree])
}

/// `d/dt G_degree(t)`, computed alongside the value recurrence.
pub fn gegenbauer_deriv_eval(degree: usize, gamma: f64, t: f64) -> Result<f64> {
    BasisSpec::gegenbauer(gamma)?;
    let t = check_domain(t)?;
    let mut values = vec![0.0; degree + 1];
    let mut derivs = vec![0.0; degree + 1];
    gegenbauer_recurrence(gamma, t, &mut values, Some(&mut derivs));
    Ok(derivs[degree])
}

/// Gegenbauer weight `(1 - t^2)^(gamma - 1/2)` on the open interval `(-1, 1)`.
pub fn weight_function(t: f64, gamma: f64) -> Result<f64> {
    BasisSpec::gegenbauer(gamma)?;
    if !(t.abs() < 1.0) {
        return Err(Error::Domain(format!(
            "weight function is defined on (-1, 1), got {t}"
        )));
    }
    Ok((1.0 - t * t).powf(gamma - 0.5))
}

/// Element-wise application of basis functions `0..=degree` to `k`.
///
/// Index 0 is always the all-ones matrix. Monomial entries are Hadamard powers.
pub fn basis_kernel_stack(
    k: &KernelMatrix,
    basis: &BasisSpec,
    degree: usize,
) -> Result<Vec<DMatrix<f64>>> {
    basis.validate()?;
    check_degree(degree)?;
    let values = k.values();
    let m = values.nrows();
    match basis.kind {
        BasisKind::Monomial => {
            let mut stack = Vec::with_capacity(degree + 1);
            stack.push(DMatrix::from_element(m, m, 1.0));
            for i in 1..=degree {
                let next = stack[i - 1].component_mul(values);
                stack.push(next);
            }
            Ok(stack)
        }
        BasisKind::Gegenbauer => {
            let clamped = clamp_to_domain(values)?;
            let mut stack = vec![DMatrix::zeros(m, m); degree + 1];
            let mut buf = vec![0.0; degree + 1];
            for j in 0..m {
                for i in 0..m {
                    gegenbauer_recurrence(basis.weight_param, clamped[(i, j)], &mut buf, None);
                    for (level, v) in stack.iter_mut().zip(&buf) {
                        level[(i, j)] = *v;
                    }
                }
            }
            Ok(stack)
        }
    }
}

fn clamp_to_domain(values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(bad) = values.iter().find(|v| !(v.abs() <= 1.0 + DOMAIN_TOL)) {
        return Err(Error::Domain(format!(
            "kernel entry {bad} lies outside [-1, 1]; Gegenbauer transforms need a normalized kernel"
        )));
    }
    Ok(values.map(|v| v.clamp(-1.0, 1.0)))
}

/// A polynomial transform `phi(t) = sum_i c_i B_i(t)` with non-negative,
/// unit-norm coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    basis: BasisSpec,
    coefficients: Vec<f64>,
}

impl TransformSpec {
    pub fn new(basis: BasisSpec, coefficients: Vec<f64>) -> Result<Self> {
        basis.validate()?;
        if coefficients.is_empty() {
            return Err(Error::InvalidCoefficients("no coefficients".into()));
        }
        check_degree(coefficients.len() - 1)?;
        if let Some(c) = coefficients.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::InvalidCoefficients(format!(
                "coefficients must be finite and non-negative, found {c}"
            )));
        }
        let norm = coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidCoefficients(format!(
                "coefficient vector has l2 norm {norm}, expected 1"
            )));
        }
        Ok(Self {
            basis,
            coefficients,
        })
    }

    /// Rescales non-negative coefficients to unit norm before validating.
    pub fn normalized(basis: BasisSpec, mut coefficients: Vec<f64>) -> Result<Self> {
        let norm = coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidCoefficients(
                "coefficient vector has zero or non-finite norm".into(),
            ));
        }
        coefficients.iter_mut().for_each(|c| *c /= norm);
        Self::new(basis, coefficients)
    }

    /// `phi(t) = B_1(t)`: the identity map for the monomial basis.
    pub fn first_order(basis: BasisSpec) -> Result<Self> {
        Self::new(basis, vec![0.0, 1.0])
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `(phi(t), phi'(t))`. Gegenbauer arguments are clamped to `[-1, 1]`.
    pub fn eval_with_derivative(&self, t: f64) -> (f64, f64) {
        let c = &self.coefficients;
        match self.basis.kind {
            BasisKind::Monomial => {
                // Horner for the value and the derivative together.
                let mut value = 0.0;
                let mut deriv = 0.0;
                for &a in c.iter().rev() {
                    deriv = deriv * t + value;
                    value = value * t + a;
                }
                (value, deriv)
            }
            BasisKind::Gegenbauer => {
                let n = c.len();
                let mut values = [0.0; MAX_DEGREE + 1];
                let mut derivs = [0.0; MAX_DEGREE + 1];
                gegenbauer_recurrence(
                    self.basis.weight_param,
                    t.clamp(-1.0, 1.0),
                    &mut values[..n],
                    Some(&mut derivs[..n]),
                );
                let value = c.iter().zip(&values[..n]).map(|(a, g)| a * g).sum();
                let deriv = c.iter().zip(&derivs[..n]).map(|(a, h)| a * h).sum();
                (value, deriv)
            }
        }
    }

    /// `phi(t)`; arguments outside `[-1, 1]` beyond round-off are rejected.
    pub fn eval(&self, t: f64) -> Result<f64> {
        Ok(self.eval_with_derivative(check_domain(t)?).0)
    }

    /// True when the transform is exactly `phi(t) = t`.
    pub fn is_identity(&self) -> bool {
        self.basis.kind == BasisKind::Monomial
            && self.coefficients.len() == 2
            && self.coefficients[0] == 0.0
            && self.coefficients[1] == 1.0
    }
}

/// `phi'(t)` for a transform; `t` must lie in `[-1, 1]` up to round-off.
pub fn transform_derivative(spec: &TransformSpec, t: f64) -> Result<f64> {
    Ok(spec.eval_with_derivative(check_domain(t)?).1)
}

/// Element-wise `phi(K)`. The result is not normalized.
pub fn apply_transform(k: &KernelMatrix, spec: &TransformSpec) -> Result<KernelMatrix> {
    if spec.basis.kind == BasisKind::Gegenbauer {
        clamp_to_domain(k.values())?;
    }
    let out = k.values().map(|t| spec.eval_with_derivative(t).0);
    Ok(KernelMatrix::new_unchecked(out, false))
}
