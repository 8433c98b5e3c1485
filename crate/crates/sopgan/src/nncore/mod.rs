//! Minimal tensor/autodiff engine: dense `f64` tensors, a define-by-run
//! reverse-mode graph, and an Adam optimizer.

mod adam;
mod graph;
pub(crate) mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
