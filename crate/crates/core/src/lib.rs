//! Desk-scale laboratory for weight averaging, sharpness-aware minimization,
//! gradient-diversity training, k-shot adaptation and covariate shift.
//!
//! Every quantity is an `f64` and every random stream is derived from a master
//! seed, so a full experiment is a pure function of its configuration.

// Negated comparisons such as `!(x > 0.0)` are used on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod cli;
pub mod data;
pub mod diversity;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod pipelines;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use models::{ModelSpec, ParamSet};
pub use tensor::{Gradients, Graph, NodeId, Op, Tensor};

/// Scientific notation with 17 significant digits; round-trips every `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
