//! Dense 2-D tensors and a reverse-mode gradient tape.
//!
//! Storage is 32-bit; reductions (matmul inner products, sums, norms)
//! accumulate in 64-bit so finite-difference checks hold at tight
//! tolerances. Only the op set the rest of the crate needs is implemented.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

/// Numerically stable scalar sigmoid, shared by attention decay and the
/// graph op.
pub fn sigmoid(x: f32) -> f32 {
    tensor::sigmoid_scalar(x)
}
