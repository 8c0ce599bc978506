//! Dense tensors, reverse-mode gradients, and the Adam optimizer.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{affine, cross_entropy_from_logits, gelu, layer_norm, softmax};
pub use store::{accumulate, AdamConfig, Gradients, Parameter, ParameterStore};
pub use tensor::Tensor;
