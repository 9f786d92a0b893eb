//! Twin Gaussian Process prediction on raw or transformed kernels.
//!
//! Two criteria are supported. `KlDiv` minimizes the reduced TGP cost
//!
//! ```text
//! L(y) = g(y,y) - 2 k_y(y)^T u - eta * log(g(y,y) - k_y(y)^T G^-1 k_y(y))
//! u    = K^-1 k_x(x*),   eta = k(x*,x*) - k_x(x*)^T u
//! ```
//!
//! where every kernel quantity is passed through the learned transform of its
//! side and both Gram matrices carry a ridge. `Hsic` maximizes the HSIC of the
//! training kernels augmented with the test pair `(x*, y)`.
//!
//! Base kernels are normalized, so `k(x*,x*) = g(y,y) = 1` before transforming
//! and the self terms do not depend on `y`.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{apply_transform, TransformSpec};
use crate::error::{Error, Result};
use crate::kernels::{kernel_gradient, kernel_matrix, kernel_row, Dataset, KernelParams};
use crate::learner::LearnedTransforms;
use crate::optimize::{minimize, OptimizerOpts};

/// Starting jitter, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;
/// Smallest admissible log-barrier argument.
pub const BARRIER_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    KlDiv,
    Hsic,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Criterion::KlDiv => f.write_str("kl_div"),
            Criterion::Hsic => f.write_str("hsic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TgpOptions {
    /// Ridge added to both Gram matrices, relative to their mean diagonal.
    pub regularization: f64,
}

impl Default for TgpOptions {
    fn default() -> Self {
        Self {
            regularization: 1e-3,
        }
    }
}

/// One side of the model: base kernel plus optional transform.
#[derive(Debug, Clone)]
struct Side {
    params: KernelParams,
    transform: Option<TransformSpec>,
}

impl Side {
    #[inline]
    fn map(&self, t: f64) -> (f64, f64) {
        match &self.transform {
            Some(spec) => spec.eval_with_derivative(t),
            None => (t, 1.0),
        }
    }

    fn self_value(&self) -> f64 {
        self.map(1.0).0
    }

    fn gram(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let base = kernel_matrix(data, &self.params)?;
        Ok(match &self.transform {
            Some(spec) => apply_transform(&base, spec)?.into_values(),
            None => base.into_values(),
        })
    }
}

/// Cholesky factor of `A + added * I`.
#[derive(Debug, Clone)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    /// Absolute diagonal addition (ridge plus jitter).
    added: f64,
    /// Relative jitter that made the factorization succeed.
    jitter: f64,
}

fn factorize(a: &DMatrix<f64>, ridge: f64) -> Result<Factor> {
    let m = a.nrows();
    let mean_diag = (a.trace() / m as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START;
    loop {
        let added = (ridge + jitter) * mean_diag;
        let mut shifted = a.clone();
        for i in 0..m {
            shifted[(i, i)] += added;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(Factor {
                chol,
                added,
                jitter,
            });
        }
        if jitter >= JITTER_MAX {
            return Err(Error::IllConditionedKernel { jitter });
        }
        jitter = (jitter * 10.0).min(JITTER_MAX);
    }
}

#[derive(Debug, Clone)]
struct KlCache {
    k_factor: Factor,
    g_factor: Factor,
}

#[derive(Debug, Clone)]
struct HsicCache {
    /// Row sums of the transformed input Gram matrix.
    k_row_sums: DVector<f64>,
    /// Sum of all entries of the transformed input Gram matrix.
    k_total: f64,
    /// Row sums of the transformed output Gram matrix.
    g_row_sums: DVector<f64>,
    g_total: f64,
    /// Frobenius inner product of the transformed input and output Gram matrices.
    kg_inner: f64,
}

#[derive(Debug, Clone)]
enum Cache {
    Kl(KlCache),
    Hsic(HsicCache),
}

/// A fitted model, immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct TgpModel {
    train: Dataset,
    input: Side,
    output: Side,
    transforms: Option<LearnedTransforms>,
    criterion: Criterion,
    options: TgpOptions,
    cache: Cache,
    /// Transformed input Gram matrix (without ridge).
    k_gram: DMatrix<f64>,
    /// Transformed output Gram matrix (without ridge).
    g_gram: DMatrix<f64>,
}

/// Outcome of [`predict`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub output: Vec<f64>,
    /// KL cost or HSIC value (not negated) at the returned output.
    pub objective_at_solution: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
}

/// Fits a model. With `transforms == None` this is plain TGP on the base kernels.
pub fn tgp_fit(
    data: &Dataset,
    kernel_x: &KernelParams,
    kernel_y: &KernelParams,
    transforms: Option<&LearnedTransforms>,
    criterion: Criterion,
    options: TgpOptions,
) -> Result<TgpModel> {
    if !(options.regularization >= 0.0 && options.regularization.is_finite()) {
        return Err(Error::Config(format!(
            "regularization must be non-negative, got {}",
            options.regularization
        )));
    }
    let input = Side {
        params: *kernel_x,
        transform: transforms.map(|t| t.input.clone()),
    };
    let output = Side {
        params: *kernel_y,
        transform: transforms.map(|t| t.output.clone()),
    };
    let k_gram = input.gram(data.inputs())?;
    let g_gram = output.gram(data.outputs())?;

    let cache = match criterion {
        Criterion::KlDiv => {
            let k_factor = factorize(&k_gram, options.regularization)?;
            let g_factor = factorize(&g_gram, options.regularization)?;
            debug!(
                "TGP fit: input jitter {:e}, output jitter {:e}",
                k_factor.jitter, g_factor.jitter
            );
            Cache::Kl(KlCache { k_factor, g_factor })
        }
        Criterion::Hsic => {
            let m = k_gram.nrows();
            let k_row_sums = DVector::from_fn(m, |i, _| k_gram.row(i).sum());
            let g_row_sums = DVector::from_fn(m, |i, _| g_gram.row(i).sum());
            Cache::Hsic(HsicCache {
                k_total: k_row_sums.sum(),
                g_total: g_row_sums.sum(),
                kg_inner: k_gram.dot(&g_gram),
                k_row_sums,
                g_row_sums,
            })
        }
    };
    Ok(TgpModel {
        train: data.clone(),
        input,
        output,
        transforms: transforms.cloned(),
        criterion,
        options,
        cache,
        k_gram,
        g_gram,
    })
}

/// Quantities that depend on the test input only.
enum QueryState {
    Kl {
        u: DVector<f64>,
        eta: f64,
    },
    Hsic {
        /// Last column of the doubly-centered augmented input kernel.
        centered_col: DVector<f64>,
        /// Contribution of every entry that does not depend on `y`.
        constant: f64,
        scale: f64,
    },
}

impl TgpModel {
    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn transforms(&self) -> Option<&LearnedTransforms> {
        self.transforms.as_ref()
    }

    pub fn options(&self) -> &TgpOptions {
        &self.options
    }

    /// Relative jitter on the output factorization (KL models only).
    pub fn jitter(&self) -> Option<f64> {
        match &self.cache {
            Cache::Kl(c) => Some(c.g_factor.jitter),
            Cache::Hsic(_) => None,
        }
    }

    /// Relative Frobenius error of `L L^T` against the regularized, jittered
    /// Gram matrix it factorizes, for the input and output sides.
    pub fn reconstruction_errors(&self) -> Option<(f64, f64)> {
        let Cache::Kl(c) = &self.cache else {
            return None;
        };
        let err = |gram: &DMatrix<f64>, f: &Factor| {
            let mut target = gram.clone();
            for i in 0..target.nrows() {
                target[(i, i)] += f.added;
            }
            let l = f.chol.l();
            (&l * l.transpose() - &target).norm() / target.norm()
        };
        Some((
            err(&self.k_gram, &c.k_factor),
            err(&self.g_gram, &c.g_factor),
        ))
    }

    /// Transformed training Gram matrices `(phi(K), psi(G))`.
    pub fn grams(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.k_gram, &self.g_gram)
    }

    fn check_dims(&self, x_star: &[f64], y: Option<&[f64]>) -> Result<()> {
        if x_star.len() != self.train.input_dim() {
            return Err(Error::Shape(format!(
                "test input has dimension {}, model expects {}",
                x_star.len(),
                self.train.input_dim()
            )));
        }
        if let Some(y) = y {
            if y.len() != self.train.output_dim() {
                return Err(Error::Shape(format!(
                    "output has dimension {}, model expects {}",
                    y.len(),
                    self.train.output_dim()
                )));
            }
        }
        Ok(())
    }

    fn query(&self, x_star: &[f64]) -> Result<QueryState> {
        let base = kernel_row(self.train.inputs(), x_star, &self.input.params)?;
        let kx = base.map(|t| self.input.map(t).0);
        let k_self = self.input.self_value();
        match &self.cache {
            Cache::Kl(c) => {
                let u = c.k_factor.chol.solve(&kx);
                let eta = k_self + c.k_factor.added - kx.dot(&u);
                Ok(QueryState::Kl { u, eta })
            }
            Cache::Hsic(c) => {
                let m = kx.len();
                let n = (m + 1) as f64;
                let kx_sum = kx.sum();
                // Row means of the augmented (m+1)x(m+1) input kernel.
                let means = DVector::from_fn(m, |i, _| (c.k_row_sums[i] + kx[i]) / n);
                let last_mean = (kx_sum + k_self) / n;
                let grand = (c.k_total + 2.0 * kx_sum + k_self) / (n * n);
                let centered_col = DVector::from_fn(m, |i, _| kx[i] - means[i] - last_mean + grand);
                let corner = k_self - 2.0 * last_mean + grand;
                // sum_{i,j<m} (K_ij - r_i - r_j + grand) G_ij
                let block = c.kg_inner - 2.0 * means.dot(&c.g_row_sums) + grand * c.g_total;
                let constant = block + corner * self.output.self_value();
                Ok(QueryState::Hsic {
                    centered_col,
                    constant,
                    scale: 1.0 / ((n - 1.0) * (n - 1.0)),
                })
            }
        }
    }

    /// Objective value and gradient with respect to `y` for a prepared query.
    fn evaluate(&self, state: &QueryState, y: &[f64]) -> Result<(f64, DVector<f64>)> {
        let base = kernel_row(self.train.outputs(), y, &self.output.params)?;
        let base_grad = kernel_gradient(self.train.outputs(), y, &self.output.params)?;
        let m = base.len();
        let mut ky = DVector::zeros(m);
        let mut dky = DVector::zeros(m);
        for i in 0..m {
            let (v, d) = self.output.map(base[i]);
            ky[i] = v;
            dky[i] = d;
        }
        // Jacobian of the transformed kernel row: J[i, d] = psi'(g_i) dg_i/dy_d.
        let jac = DMatrix::from_fn(m, base_grad.ncols(), |i, d| dky[i] * base_grad[(i, d)]);
        match (state, &self.cache) {
            (QueryState::Kl { u, eta }, Cache::Kl(c)) => {
                let g_self = self.output.self_value() + c.g_factor.added;
                let w = c.g_factor.chol.solve(&ky);
                let arg = g_self - ky.dot(&w);
                if !(arg > BARRIER_MIN) {
                    return Err(Error::BarrierViolation(arg));
                }
                let value = g_self - 2.0 * ky.dot(u) - eta * arg.ln();
                let grad = jac.tr_mul(&(u * -2.0 + &w * (2.0 * eta / arg)));
                Ok((value, grad))
            }
            (
                QueryState::Hsic {
                    centered_col,
                    constant,
                    scale,
                },
                Cache::Hsic(_),
            ) => {
                let value = scale * (constant + 2.0 * centered_col.dot(&ky));
                let grad = jac.tr_mul(centered_col) * (2.0 * scale);
                Ok((value, grad))
            }
            _ => unreachable!("query state always matches the model criterion"),
        }
    }

    fn objective(
        &self,
        criterion: Criterion,
        x_star: &[f64],
        y: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        if self.criterion != criterion {
            return Err(Error::Config(format!(
                "model was fitted for {}, not {criterion}",
                self.criterion
            )));
        }
        self.check_dims(x_star, Some(y))?;
        let state = self.query(x_star)?;
        let (v, g) = self.evaluate(&state, y)?;
        Ok((v, g.iter().copied().collect()))
    }
}

/// Reduced TGP KL cost at `(x_star, y)` and its gradient in `y`.
pub fn kl_objective(model: &TgpModel, x_star: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    model.objective(Criterion::KlDiv, x_star, y)
}

/// HSIC of the augmented kernels at `(x_star, y)` and its gradient in `y`.
pub fn hsic_objective(model: &TgpModel, x_star: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    model.objective(Criterion::Hsic, x_star, y)
}

/// Training rows ordered by decreasing base input-kernel similarity to `x_star`.
fn neighbors(model: &TgpModel, x_star: &[f64]) -> Result<Vec<usize>> {
    let sims = kernel_row(model.train.inputs(), x_star, &model.input.params)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Predicts the output for `x_star` by local optimization from the nearest
/// training outputs.
pub fn predict(model: &TgpModel, x_star: &[f64], opts: &OptimizerOpts) -> Result<Prediction> {
    opts.validate()?;
    model.check_dims(x_star, None)?;
    let state = model.query(x_star)?;
    let order = neighbors(model, x_star)?;
    let starts = (1 + opts.restarts).min(order.len());
    // HSIC is maximized; its raw scale is (m)^-2, so the optimizer sees the
    // negated value times (n-1)^2 to keep gradient tolerances meaningful.
    let (sign, rescale) = match &state {
        QueryState::Kl { .. } => (1.0, 1.0),
        QueryState::Hsic { scale, .. } => (-1.0, 1.0 / scale),
    };

    let mut best: Option<(crate::optimize::Minimum, usize)> = None;
    let mut total_iters = 0;
    let mut last_error = None;
    for (attempt, &row) in order.iter().take(starts).enumerate() {
        let y0: Vec<f64> = model.train.outputs().row(row).iter().copied().collect();
        let run = minimize(
            |y: &[f64]| {
                let (v, g) = model.evaluate(&state, y)?;
                Ok((
                    sign * rescale * v,
                    g.iter().map(|gi| sign * rescale * gi).collect(),
                ))
            },
            y0,
            opts,
        );
        match run {
            Ok(min) => {
                total_iters += min.iterations;
                let better = match &best {
                    None => true,
                    Some((b, _)) => match (min.converged, b.converged) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => min.value < b.value,
                    },
                };
                if better {
                    best = Some((min, attempt));
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    let Some((min, _)) = best else {
        return Err(Error::OptimizationFailure(format!(
            "all {starts} starts failed; last error: {}",
            last_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    };
    Ok(Prediction {
        objective_at_solution: sign * min.value / rescale,
        output: min.x,
        iterations: total_iters.min(opts.max_iters * starts),
        converged: min.converged,
        restarts_used: starts - 1,
    })
}

/// Predicts every row of `inputs`, in parallel, preserving row order.
pub fn predict_many(
    model: &TgpModel,
    inputs: &DMatrix<f64>,
    opts: &OptimizerOpts,
) -> Result<Vec<Prediction>> {
    (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = inputs.row(i).iter().copied().collect();
            predict(model, &x, opts)
        })
        .collect()
}
