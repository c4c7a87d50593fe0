//! Minimal differentiable computation: tensors, named parameters, an eager
//! reverse-mode tape, attention blocks, optimizers, gradient checking and a
//! checkpoint container.
//!
//! Arithmetic is 64-bit; parameter values are stored at 32-bit precision and
//! re-rounded after every optimizer update.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{glorot, ParamSet, Parameter, Tag};
pub use tensor::Tensor;
