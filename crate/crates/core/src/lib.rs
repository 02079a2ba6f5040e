//! Amortized variational inference for deep Gaussian processes.
//!
//! Layers are sparse GPs whose inducing points and variational parameters
//! are produced per input by learned inference functions. Gradients come from
//! the small reverse-mode engine in [`adcore`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::too_many_arguments)]

pub mod adcore;
pub mod amortizer;
pub mod config;
pub mod data;
pub mod deepmodel;
pub mod error;
pub mod experiment;
pub mod gpmath;
pub mod layers;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
