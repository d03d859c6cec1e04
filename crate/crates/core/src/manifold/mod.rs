//! Convolutional autoencoder and conditional VAE over patches, both with a
//! two-dimensional latent space.
//!
//! The encoder is a stack of stride-2 convolutions followed by a dense head;
//! the decoder mirrors it with transposed convolutions and ends in a sigmoid,
//! so decoded patches always lie in `[0, 1]`. The CVAE sees its parameter
//! group as five one-hot planes appended to the encoder input and as five
//! extra values appended to the latent code.

mod model;
mod train;

pub use model::{
    reconstruction_report, sample_ae_patch, sample_cvae_patch, AeModel, Architecture, CvaeModel,
    LatentBox, ModelKind, ReconstructionReport, Reconstructor,
};
pub use train::{
    ae_objective, cvae_objective, train_ae, train_cvae, CvaeLoss, EpochLoss, TrainConfig,
    TrainReport,
};

/// Latent dimensionality of both models.
pub const LATENT_DIM: usize = 2;

/// Number of conditioning groups (A–E).
pub const CONDITIONS: usize = 5;
