//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves carry parameters or
//! constants; every op appends a node whose inputs already exist, so a single
//! reverse sweep over node ids is a valid backward order.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use graph::stable_log_sigmoid;
pub use graph::{Graph, Op, Var, MASK_VALUE};
pub use tensor::Tensor;
