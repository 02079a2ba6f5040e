//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub mod linalg;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, check_param_gradients, GradCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{softplus_inv, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("cholesky failed: matrix {batch} is not positive definite at pivot {pivot}")]
    NotPositiveDefinite { batch: usize, pivot: usize },
    #[error("non-finite value produced by `{primitive}`")]
    NonFinite { primitive: &'static str },
}
