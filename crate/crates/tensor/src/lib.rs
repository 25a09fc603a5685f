//! Dense tensors and a single-owner reverse-mode tape, sized for small CNNs,
//! attention blocks and the losses around them.

pub mod error;
pub mod gradcheck;
mod graph;
mod ops;
pub mod real;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchNormMode, Grads, Graph, Var};
pub use ops::{conv2d_direct, log_softmax_rows, softmax_rows, BatchStats};
pub use real::Real;
pub use rng::{RngState, RngStream};
pub use tensor::{numel, strides, Tensor};

/// Rearrange axes of a plain tensor (no tape).
pub fn permute<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    ops::permute_tensor(t, perm)
}
