//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod optim;
mod store;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Activation, Graph, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use store::{Gradients, ParamId, ParamStore, UpdateMask};
pub use tensor::Tensor;
