//! Base kernels, the empirical HSIC estimator and kernel gradients.
//!
//! Every base kernel produced here is normalized: RBF entries lie in `(0, 1]`
//! with a unit diagonal, and linear kernels are cosine-normalized so their
//! entries lie in `[-1, 1]`. Polynomial transforms downstream rely on that range.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when checking kernel symmetry.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// HSIC values closer than this to zero are reported as exactly zero.
pub const HSIC_ZERO_TOL: f64 = 1e-12;

/// Paired input/output observations, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::Shape(format!(
                "inputs have {} rows but outputs have {}",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if inputs.nrows() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: inputs.nrows(),
            });
        }
        if inputs.ncols() == 0 || outputs.ncols() == 0 {
            return Err(Error::Shape(
                "inputs and outputs need at least one column".into(),
            ));
        }
        check_finite(&inputs, "inputs")?;
        check_finite(&outputs, "outputs")?;
        Ok(Self {
            inputs,
            outputs,
            names: None,
        })
    }

    /// Attaches column labels, inputs first then outputs.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.input_dim() + self.output_dim() {
            return Err(Error::Shape(format!(
                "expected {} column names, got {}",
                self.input_dim() + self.output_dim(),
                names.len()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    /// Returns the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Shape(format!(
                "row index {bad} out of range for {} rows",
                self.len()
            )));
        }
        let inputs = self.inputs.select_rows(indices);
        let outputs = self.outputs.select_rows(indices);
        let mut out = Self::new(inputs, outputs)?;
        out.names = self.names.clone();
        Ok(out)
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::InvalidData(format!(
            "non-finite value in {what} at row {}, column {}",
            pos % m.nrows(),
            pos / m.nrows()
        ))),
        None => Ok(()),
    }
}

/// Base kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-bandwidth * ||a - b||^2)`.
    Rbf,
    /// `bandwidth * <a, b>`, cosine-normalized.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelParams {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        let params = Self { family, bandwidth };
        params.validate()?;
        Ok(params)
    }

    pub fn rbf(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, bandwidth)
    }

    pub fn linear(scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Linear, scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidKernelParam(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Evaluates the normalized kernel between two points.
    ///
    /// For the linear family `norm_a` and `norm_b` are the Euclidean norms of
    /// the arguments; they are ignored for RBF.
    #[inline]
    fn eval_with_norms(&self, a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.bandwidth * sq).exp()
            }
            KernelFamily::Linear => {
                // The scale cancels under cosine normalization.
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                dot / (norm_a * norm_b)
            }
        }
    }

    /// Evaluates the normalized kernel between two points.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "points have dimensions {} and {}",
                a.len(),
                b.len()
            )));
        }
        let (na, nb) = match self.family {
            KernelFamily::Rbf => (1.0, 1.0),
            KernelFamily::Linear => (nonzero_norm(a)?, nonzero_norm(b)?),
        };
        Ok(self.eval_with_norms(a, b, na, nb))
    }
}

fn nonzero_norm(v: &[f64]) -> Result<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        Ok(n)
    } else {
        Err(Error::DegenerateInput(
            "zero-norm point under the cosine-normalized linear kernel".into(),
        ))
    }
}

/// Symmetric Gram matrix plus a flag recording whether entries are normalized
/// (unit diagonal, entries in `[-1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    normalized: bool,
}

impl KernelMatrix {
    /// Wraps a square symmetric matrix. When `normalized` is set the diagonal
    /// must be exactly one and all entries must lie in `[-1, 1]`.
    pub fn new(values: DMatrix<f64>, normalized: bool) -> Result<Self> {
        let m = values.nrows();
        if values.ncols() != m {
            return Err(Error::Shape(format!(
                "kernel matrix must be square, got {}x{}",
                m,
                values.ncols()
            )));
        }
        check_finite(&values, "kernel matrix")?;
        for i in 0..m {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidData(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if normalized {
            if (0..m).any(|i| values[(i, i)] != 1.0) {
                return Err(Error::InvalidData(
                    "normalized kernel matrix needs a unit diagonal".into(),
                ));
            }
            if values.iter().any(|v| v.abs() > 1.0) {
                return Err(Error::InvalidData(
                    "normalized kernel matrix has entries outside [-1, 1]".into(),
                ));
            }
        }
        Ok(Self { values, normalized })
    }

    pub(crate) fn new_unchecked(values: DMatrix<f64>, normalized: bool) -> Self {
        Self { values, normalized }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Smallest eigenvalue of the symmetric matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn rows_of(data: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..data.nrows())
        .map(|i| data.row(i).iter().copied().collect())
        .collect()
}

fn norms_for(params: &KernelParams, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    match params.family {
        KernelFamily::Rbf => Ok(vec![1.0; rows.len()]),
        KernelFamily::Linear => rows.iter().map(|r| nonzero_norm(r)).collect(),
    }
}

/// Gram matrix of the rows of `data` under `params`.
pub fn kernel_matrix(data: &DMatrix<f64>, params: &KernelParams) -> Result<KernelMatrix> {
    params.validate()?;
    let m = data.nrows();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    check_finite(data, "kernel input")?;
    let rows = rows_of(data);
    let norms = norms_for(params, &rows)?;

    // Each row is computed independently so the result does not depend on
    // how rayon schedules the work.
    let row_values: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        params
                            .eval_with_norms(&rows[i], &rows[j], norms[i], norms[j])
                            .clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(m, m, |i, j| row_values[i][j]);
    Ok(KernelMatrix::new_unchecked(values, true))
}

/// Cross-kernel vector between every training row and `query`.
pub fn kernel_row(
    train: &DMatrix<f64>,
    query: &[f64],
    params: &KernelParams,
) -> Result<DVector<f64>> {
    params.validate()?;
    if query.len() != train.ncols() {
        return Err(Error::Shape(format!(
            "query has dimension {} but training inputs have {}",
            query.len(),
            train.ncols()
        )));
    }
    let query_norm = match params.family {
        KernelFamily::Rbf => 1.0,
        KernelFamily::Linear => nonzero_norm(query)?,
    };
    let mut out = DVector::zeros(train.nrows());
    let mut row = vec![0.0; train.ncols()];
    for i in 0..train.nrows() {
        for (d, r) in row.iter_mut().enumerate() {
            *r = train[(i, d)];
        }
        let norm = match params.family {
            KernelFamily::Rbf => 1.0,
            KernelFamily::Linear => nonzero_norm(&row)?,
        };
        out[i] = params
            .eval_with_norms(&row, query, norm, query_norm)
            .clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Jacobian of [`kernel_row`] with respect to the query: entry `(i, d)` is
/// `d k(x_i, x) / d x_d` at `x = query`.
pub fn kernel_gradient(
    train: &DMatrix<f64>,
    query: &[f64],
    params: &KernelParams,
) -> Result<DMatrix<f64>> {
    let values = kernel_row(train, query, params)?;
    let (m, p) = (train.nrows(), train.ncols());
    let mut grad = DMatrix::zeros(m, p);
    match params.family {
        KernelFamily::Rbf => {
            for i in 0..m {
                for d in 0..p {
                    grad[(i, d)] = -2.0 * params.bandwidth * (query[d] - train[(i, d)]) * values[i];
                }
            }
        }
        KernelFamily::Linear => {
            // d/dx <a,x>/(|a||x|) = a/(|a||x|) - k x/|x|^2
            let qn = nonzero_norm(query)?;
            for i in 0..m {
                let an = train.row(i).norm();
                for d in 0..p {
                    grad[(i, d)] = train[(i, d)] / (an * qn) - values[i] * query[d] / (qn * qn);
                }
            }
        }
    }
    Ok(grad)
}

/// `H A H` with `H = I - 11^T/m`, computed from row, column and grand means.
pub fn double_center(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let mf = m as f64;
    let row_means: Vec<f64> = (0..m).map(|i| a.row(i).sum() / mf).collect();
    let col_means: Vec<f64> = (0..m).map(|j| a.column(j).sum() / mf).collect();
    let grand = row_means.iter().sum::<f64>() / mf;
    DMatrix::from_fn(m, m, |i, j| a[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// Empirical HSIC `(m-1)^-2 tr(K H G H)` of two same-sized matrices.
///
/// The result is non-negative whenever both arguments are PSD; values within
/// [`HSIC_ZERO_TOL`] of zero are returned as exactly zero. Indefinite inputs
/// can give genuinely negative values, which are returned unchanged.
pub fn hsic_dense(k: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let m = k.nrows();
    if k.ncols() != m || g.nrows() != m || g.ncols() != m {
        return Err(Error::Shape(format!(
            "HSIC needs two square matrices of equal size, got {}x{} and {}x{}",
            k.nrows(),
            k.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let centered = double_center(g);
    Ok(hsic_from_centered(k, &centered))
}

/// HSIC given one argument already double-centered.
pub(crate) fn hsic_from_centered(k: &DMatrix<f64>, centered: &DMatrix<f64>) -> f64 {
    let m = k.nrows() as f64;
    let value = k.dot(centered) / ((m - 1.0) * (m - 1.0));
    if value.abs() < HSIC_ZERO_TOL {
        0.0
    } else {
        value
    }
}

/// Empirical HSIC between two kernel matrices.
pub fn hsic(k: &KernelMatrix, g: &KernelMatrix) -> Result<f64> {
    hsic_dense(k.values(), g.values())
}
