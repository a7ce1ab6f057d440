//! Dense `f32`/`f64` tensors and a define-by-run autograd tape covering the
//! layers of an encoder/decoder segmentation network: strided and transposed
//! convolutions, batch normalization, linear layers on token matrices, the
//! token reductions used by additive attention, and Dice / cross-entropy / L1
//! objectives.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BnMode, BnUpdate, Gradients, Graph, Var};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
