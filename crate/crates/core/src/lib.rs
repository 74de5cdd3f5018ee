// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod covkernel;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod matched;
pub mod model;
pub mod sampler;
pub mod simharness;

pub use error::{Error, Result};
