//! Minimal CPU tensor and layer toolkit with hand-written backward passes.

pub mod layers;
pub mod optim;
pub mod tensor;

pub use layers::{Conv2d, Dense, ParamGrad};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
