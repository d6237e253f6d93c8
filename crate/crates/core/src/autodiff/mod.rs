//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each operation together with its forward value.
//! [`Tape::backward`] sweeps the record once in reverse and returns the
//! gradient of a scalar node with respect to every differentiable leaf.
//!
//! Broadcasting is limited to two cases: a one-element operand against any
//! shape, and a row vector `[k]` against a matrix `[n, k]`.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{BinaryOp, UnaryOp};
pub use tape::{Gradients, NodeId, Op, Tape};
