//! Minimal neural-network core: tensors, a fixed layer set with exact
//! backpropagation, optimizers and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod network;
mod optim;
mod tensor;

pub use gradcheck::{
    grad_check, max_relative_error, max_relative_error_with_floor, numeric_gradient,
    numeric_input_gradient, squared_error,
};
pub use layers::{sigmoid, LayerParams, LayerSpec, Padding};
pub use network::{Gradients, NetworkSpec, NetworkState};
pub use optim::{Method, Optimizer, OptimizerConfig};
pub use tensor::{euclidean_distance, squared_distance, Tensor};
