//! Learnable-threshold gradual pruning.
//!
//! Every prunable weight matrix gets an importance-score grid and a single
//! learnable threshold `σ_i`. The threshold sets the matrix's keep fraction
//! `k(σ_i) = sigmoid(σ_i / T)`, a Top-K mask over the scores realises it, and a
//! one-sided quadratic penalty on the global remaining ratio pulls the network
//! towards a target density with an adaptively scaled coefficient.

// NaN must fail the range checks, so negated comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod report;
pub mod schedule;
pub mod sweep;
pub mod tensor;
pub mod threshold;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
