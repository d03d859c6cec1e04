//! A small reverse-mode network engine: convolution, transposed convolution,
//! dense and activation layers with hand-written backward passes, the MSE and
//! Gaussian-KL losses, AdamW and a step learning-rate schedule.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod layers;
mod loss;
mod network;
mod optim;
mod tensor;

pub use checkpoint::{load_network, save_network, CheckpointHeader};
pub use layers::{LayerParams, LayerSpec};
pub use loss::{kl_gaussian, mse_loss, KlOutput};
pub use network::{Gradients, Network, Tape};
pub use optim::{AdamWConfig, OptimizerState, StepLr};
pub use tensor::{Real, Tensor};
