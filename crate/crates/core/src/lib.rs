//! CPU engine for a cosine-annealed heterogeneous super-resolution network:
//! tensors and convolution kernels, a static autograd graph, the network
//! builder with checkpointing, Adam with warm-restart cosine annealing,
//! evaluation metrics and data preparation.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
