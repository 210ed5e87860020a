//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Calling
//! [`Tape::backward`] on a `1×1` output returns gradients for every
//! [`Tape::parameter`] leaf. Higher-order quantities such as the spatial
//! gradient of a network output are built by recording their forward-mode
//! propagation on the same tape, after which a single reverse pass
//! differentiates through them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod check;
mod error;
mod matrix;
mod tape;

pub use check::{
    evaluate, evaluate_with_gradient, finite_difference_gradient, gradient_check,
    gradient_check_with_step, relative_error, GradientReport, DEFAULT_FD_STEP,
};
pub use error::{Result, TapeError};
pub use matrix::Matrix;
pub use tape::{BinaryOp, CustomOp, Gradients, Tape, UnaryOp, Var};
