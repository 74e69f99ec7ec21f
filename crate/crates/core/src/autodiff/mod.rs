//! Minimal dense tensor engine with reverse-mode gradients and optimizers.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState, PlateauSchedule};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;
