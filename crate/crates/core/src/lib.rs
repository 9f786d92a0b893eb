//! Learned polynomial transforms of input and output kernel matrices, chosen
//! to maximize the empirical Hilbert-Schmidt Independence Criterion, and their
//! use inside Twin Gaussian Process structured regression.
//!
//! The pipeline is: base kernels ([`kernels`]) are expanded element-wise in a
//! monomial or Gegenbauer basis ([`basis`]); the HSIC between every pair of
//! input/output basis kernels forms a non-negative matrix whose leading
//! singular pair gives the transform coefficients ([`learner`]); the
//! transformed kernels then drive TGP prediction ([`tgp`]). [`data`] and
//! [`harness`] provide datasets and the experiment driver.

// NaN must fail these range checks, so negated comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod learner;
pub mod optimize;
pub mod tgp;

pub use basis::{
    apply_transform, basis_kernel_stack, gegenbauer_deriv_eval, gegenbauer_eval,
    transform_derivative, weight_function, BasisKind, BasisSpec, TransformSpec,
};
pub use error::{Error, Result};
pub use harness::{
    cross_validate, gain_percent, mae, run_experiment, select_by_cv, CellResult, CvOutcome,
    ExperimentConfig, Report,
};
pub use kernels::{
    hsic, hsic_dense, kernel_gradient, kernel_matrix, kernel_row, Dataset, KernelFamily,
    KernelMatrix, KernelParams,
};
pub use learner::{
    build_c_matrix, learn_transforms, solve_coefficients, CMatrix, LearnedTransforms,
};
pub use optimize::OptimizerOpts;
pub use tgp::{
    hsic_objective, kl_objective, predict, predict_many, tgp_fit, Criterion, Prediction, TgpModel,
    TgpOptions,
};
