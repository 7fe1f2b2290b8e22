//! Dense `f64` tensors with reverse-mode differentiation.

mod decisions;
mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use decisions::Decisions;
pub use gradcheck::{grad_check, grad_check_scaled, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{kl_divergence, scaled_dot_attention, softmax};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
