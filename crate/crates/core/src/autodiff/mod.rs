//! Dense 64-bit tensors, a define-by-run graph with reverse-mode gradients,
//! optimizers and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, MAX_COORDS_PER_TENSOR};
pub use graph::{
    cross_entropy, layer_norm, relu, sigmoid, softmax, Gradients, Graph, NodeId, LAYER_NORM_EPS, P_CLAMP,
};
pub use optim::{Optimizer, OptimizerKind};
pub use params::ParameterSet;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
