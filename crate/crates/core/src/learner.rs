//! Learning input and output transforms by maximizing HSIC.
//!
//! With `phi(K) = sum_i a_i K^(i)` and `psi(G) = sum_j b_j G^(j)` the HSIC of
//! the transformed kernels is bilinear, `a^T C b` with
//! `C[i][j] = HSIC(K^(i), G^(j))`. Under unit-norm constraints the maximizer is
//! the leading singular pair of `C`, and since `C` is entrywise non-negative
//! that pair can be taken non-negative.
//!
//! `K^(0)` and `G^(0)` are constant, so row and column 0 of `C` vanish and the
//! constant coefficients of both transforms are always zero. The solver works
//! on the block without index 0 and re-embeds the zeros.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_kernel_stack, BasisKind, BasisSpec, TransformSpec};
use crate::error::{Error, Result};
use crate::kernels::{double_center, hsic_from_centered, kernel_matrix, Dataset, KernelParams};

/// Entries of the C-matrix below this value are flushed to zero.
pub const C_FLUSH_TOL: f64 = 1e-14;

/// Components of the sign-fixed singular vectors may dip this far below zero
/// from round-off before being clamped.
pub const NEGATIVE_COMPONENT_TOL: f64 = 1e-10;

/// Relative gap under which two leading singular values are treated as tied.
pub const SINGULAR_TIE_TOL: f64 = 1e-12;

/// Pairwise HSIC between input and output basis kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    values: DMatrix<f64>,
    /// Number of genuinely negative HSIC values (possible for indefinite
    /// basis kernels) that were clamped to zero.
    pub clamped_negative: usize,
    pub input_basis: Option<BasisSpec>,
    pub output_basis: Option<BasisSpec>,
}

impl CMatrix {
    /// Wraps a non-negative matrix.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidData(format!(
                "C-matrix entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            values,
            clamped_negative: 0,
            input_basis: None,
            output_basis: None,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `(d1, d2)`: one less than the row and column counts.
    pub fn degrees(&self) -> (usize, usize) {
        (
            self.values.nrows().saturating_sub(1),
            self.values.ncols().saturating_sub(1),
        )
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.values.nrows())
            .map(|i| self.values.row(i).iter().copied().collect())
            .collect()
    }
}

/// `C[i][j] = HSIC(k_stack[i], g_stack[j])`, clamped non-negative.
pub fn build_c_matrix(k_stack: &[DMatrix<f64>], g_stack: &[DMatrix<f64>]) -> Result<CMatrix> {
    if k_stack.is_empty() || g_stack.is_empty() {
        return Err(Error::Shape("basis stacks must be non-empty".into()));
    }
    let m = k_stack[0].nrows();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    if let Some(bad) = k_stack
        .iter()
        .chain(g_stack)
        .find(|s| s.nrows() != m || s.ncols() != m)
    {
        return Err(Error::Shape(format!(
            "all stack matrices must be {m}x{m}, found {}x{}",
            bad.nrows(),
            bad.ncols()
        )));
    }
    let centered: Vec<DMatrix<f64>> = g_stack.par_iter().map(double_center).collect();
    let (rows, cols) = (k_stack.len(), g_stack.len());
    let cells: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| hsic_from_centered(&k_stack[idx / cols], &centered[idx % cols]))
        .collect();

    let mut clamped_negative = 0;
    let values = DMatrix::from_fn(rows, cols, |i, j| {
        let v = cells[i * cols + j];
        if v < 0.0 {
            clamped_negative += 1;
            0.0
        } else if v < C_FLUSH_TOL {
            0.0
        } else {
            v
        }
    });
    if clamped_negative > 0 {
        warn!("{clamped_negative} negative HSIC entries clamped to zero in the C-matrix");
    }
    Ok(CMatrix {
        values,
        clamped_negative,
        input_basis: None,
        output_basis: None,
    })
}

/// Leading singular pair of a C-matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularPair {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// Set when the leading singular value was not simple.
    pub tie_warning: Option<String>,
}

/// Non-negative unit vectors `(alpha, beta)` maximizing `alpha^T C beta`.
pub fn solve_coefficients(c: &CMatrix) -> Result<SingularPair> {
    let values = c.values();
    let (rows, cols) = (values.nrows(), values.ncols());
    if rows < 2 || cols < 2 || values.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateObjective(
            "C-matrix is identically zero; the basis stacks carry no dependence".into(),
        ));
    }
    let block = values.view((1, 1), (rows - 1, cols - 1)).into_owned();
    let svd = block.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigmas = &svd.singular_values;

    let top = sigmas.iter().copied().fold(0.0, f64::max);
    let tied: Vec<usize> = (0..sigmas.len())
        .filter(|&k| sigmas[k] >= top * (1.0 - SINGULAR_TIE_TOL))
        .collect();

    let mut candidates: Vec<(Vec<f64>, Vec<f64>)> = tied
        .iter()
        .map(|&k| {
            let a: Vec<f64> = u.column(k).iter().copied().collect();
            let b: Vec<f64> = v_t.row(k).iter().copied().collect();
            sign_fixed(a, b)
        })
        .collect();
    let tie_warning = if candidates.len() > 1 {
        candidates.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal));
        let msg = format!(
            "leading singular value {top} has multiplicity {}; picked the lexicographically largest pair",
            candidates.len()
        );
        warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    let (a, b) = candidates.swap_remove(0);
    let a = clamp_renormalize(a);
    let b = clamp_renormalize(b);

    let mut alpha = vec![0.0; rows];
    let mut beta = vec![0.0; cols];
    alpha[1..].copy_from_slice(&a);
    beta[1..].copy_from_slice(&b);
    let sigma = DVector::from_column_slice(&a).dot(&(&block * DVector::from_column_slice(&b)));
    Ok(SingularPair {
        alpha,
        beta,
        sigma,
        tie_warning,
    })
}

/// Flips the pair so the largest-magnitude component of `a` is positive.
fn sign_fixed(mut a: Vec<f64>, mut b: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let pivot = a
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        a.iter_mut().for_each(|x| *x = -*x);
        b.iter_mut().for_each(|x| *x = -*x);
    }
    (a, b)
}

fn clamp_renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let worst = v.iter().copied().fold(0.0, f64::min);
    if worst < -NEGATIVE_COMPONENT_TOL {
        warn!("singular vector component {worst} is negative beyond round-off; clamping");
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Learned input (`phi`) and output (`psi`) transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedTransforms {
    pub input: TransformSpec,
    pub output: TransformSpec,
    pub objective_value: f64,
    pub kernel_x: KernelParams,
    pub kernel_y: KernelParams,
    /// Absent when the transforms were loaded from JSON.
    pub c_matrix: Option<CMatrix>,
    pub warnings: Vec<String>,
}

/// On-disk form of [`LearnedTransforms`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedTransformsDoc {
    pub basis: BasisKind,
    pub weight_param: f64,
    pub d1: usize,
    pub d2: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub objective: f64,
    pub kernel_params: KernelParamsPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParamsPair {
    pub x: KernelParams,
    pub y: KernelParams,
}

impl LearnedTransforms {
    pub fn basis(&self) -> &BasisSpec {
        self.input.basis()
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.input.degree(), self.output.degree())
    }

    pub fn to_doc(&self) -> LearnedTransformsDoc {
        let (d1, d2) = self.degrees();
        LearnedTransformsDoc {
            basis: self.basis().kind,
            weight_param: self.basis().weight_param,
            d1,
            d2,
            alpha: self.input.coefficients().to_vec(),
            beta: self.output.coefficients().to_vec(),
            objective: self.objective_value,
            kernel_params: KernelParamsPair {
                x: self.kernel_x,
                y: self.kernel_y,
            },
        }
    }

    pub fn from_doc(doc: &LearnedTransformsDoc) -> Result<Self> {
        let basis = BasisSpec {
            kind: doc.basis,
            weight_param: doc.weight_param,
        };
        if doc.alpha.len() != doc.d1 + 1 || doc.beta.len() != doc.d2 + 1 {
            return Err(Error::InvalidCoefficients(format!(
                "coefficient lengths {}/{} do not match degrees ({}, {})",
                doc.alpha.len(),
                doc.beta.len(),
                doc.d1,
                doc.d2
            )));
        }
        doc.kernel_params.x.validate()?;
        doc.kernel_params.y.validate()?;
        Ok(Self {
            input: TransformSpec::new(basis, doc.alpha.clone())?,
            output: TransformSpec::new(basis, doc.beta.clone())?,
            objective_value: doc.objective,
            kernel_x: doc.kernel_params.x,
            kernel_y: doc.kernel_params.y,
            c_matrix: None,
            warnings: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }
}

/// Kernel matrices, basis stacks, C-matrix and its leading singular pair.
pub fn learn_transforms(
    data: &Dataset,
    kernel_x: &KernelParams,
    kernel_y: &KernelParams,
    basis: &BasisSpec,
    d1: usize,
    d2: usize,
) -> Result<LearnedTransforms> {
    if d1 < 1 || d2 < 1 {
        return Err(Error::DegenerateObjective(format!(
            "degrees must be at least 1, got ({d1}, {d2})"
        )));
    }
    basis.validate()?;
    let k = kernel_matrix(data.inputs(), kernel_x)?;
    let g = kernel_matrix(data.outputs(), kernel_y)?;
    let k_stack = basis_kernel_stack(&k, basis, d1)?;
    let g_stack = basis_kernel_stack(&g, basis, d2)?;
    let mut c = build_c_matrix(&k_stack, &g_stack)?;
    c.input_basis = Some(*basis);
    c.output_basis = Some(*basis);
    let pair = solve_coefficients(&c)?;

    let mut warnings = Vec::new();
    if c.clamped_negative > 0 {
        warnings.push(format!(
            "{} negative C-matrix entries clamped to zero",
            c.clamped_negative
        ));
    }
    warnings.extend(pair.tie_warning.clone());
    Ok(LearnedTransforms {
        input: TransformSpec::new(*basis, pair.alpha)?,
        output: TransformSpec::new(*basis, pair.beta)?,
        objective_value: pair.sigma.max(0.0),
        kernel_x: *kernel_x,
        kernel_y: *kernel_y,
        c_matrix: Some(c),
        warnings,
    })
}
