//! Dimensionality reduction over adversarial patches.
//!
//! Fits PCA ("eigenpatches"), a convolutional autoencoder and a conditional
//! variational autoencoder to a patch set, reconstructs and samples patches
//! from each latent space, composites patches into annotated images, scores
//! detections with mAP and embeds patches with exact t-SNE.

pub mod cli;
pub mod compositor;
pub mod config;
pub mod detector;
pub mod eigen;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod manifold;
pub mod neural;
pub mod patch;
pub mod rng;
pub mod tensor_file;

pub use error::{Error, Result};
