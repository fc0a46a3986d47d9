//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, relative_error, GradCheck};
pub use tape::{Gradients, ReduceKind, Tape, Var};

#[cfg(test)]
pub(crate) use tape::softplus;
