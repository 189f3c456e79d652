//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! The operation set is exactly what the encoders, channel and losses
//! need: matrix multiply, bias add, elementwise add/sub/mul, ReLU,
//! per-sample normalization, row-wise L2 normalization and cosine
//! similarity, softmax cross-entropy, MSE, scaling, concat/slice along
//! the last axis, reductions, and the two channel primitives (power
//! projection and complex gain).

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_with};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, NORM_FLOOR};

#[cfg(test)]
mod tests;
