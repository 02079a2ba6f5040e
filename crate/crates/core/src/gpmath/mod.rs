//! Kernels, Gaussian conditionals, KL divergences and quadrature.

mod gaussian;
mod kernel;
mod quadrature;

pub use gaussian::{
    chol_inverse_diag, conditional, gauss_kl, jittered_cholesky, Conditional, GaussianMarginal, MeanFn, QSqrt,
    JITTER_MAX, JITTER_START,
};
pub use kernel::{kernel_diag, matern52, matern52_matrix, matern52_value, KernelParams};
pub use quadrature::{
    gauss_hermite, gauss_hermite_expect, log_ndtr, log_ndtr_value, normal_log_pdf, probit, probit_value,
    DEFAULT_HERMITE_POINTS, HALF_LN_2PI,
};
