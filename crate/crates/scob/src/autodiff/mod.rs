//! Minimal reverse-mode automatic differentiation.
//!
//! Everything differentiable in this crate runs through the [`Tape`]: the
//! convolutional backbone, the masked transformers, and every loss term.
//! [`check::finite_diff_check`] is the independent oracle used by the test
//! suites to verify each primitive and the composed network graph.

mod check;
pub mod kernels;
mod tape;

pub use check::{finite_diff_check, ScalarFn};
pub use tape::{Tape, Tensor};
