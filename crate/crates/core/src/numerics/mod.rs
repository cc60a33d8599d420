//! Dense tensors and reverse-mode differentiation.

mod real;
mod tape;
mod tensor;

pub use real::Real;
#[allow(unused_imports)]
pub(crate) use real::{gemm, MatLayout};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
