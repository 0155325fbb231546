//! Dense tensors and a reverse-mode tape over a fixed set of primitives.

mod finite_diff;
mod ops;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff, GradCheck, GradMismatch};
pub use ops::{
    corner_bits, forward_op, trilinear_corner_weights, Op, COSINE_EPS,
};
#[cfg(test)]
pub(crate) use ops::sigmoid;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
