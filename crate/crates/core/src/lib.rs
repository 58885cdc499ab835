//! Four-plane factorized latent representations for video.
//!
//! The crate bundles a small reverse-mode autodiff engine, a causal 3D
//! convolutional autoencoder, the four-plane factorization and its inverse,
//! a transformer latent-diffusion stack operating on flattened plane tokens,
//! and an analytical cost model comparing volumetric and factorized latents.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod costmodel;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaldata;
pub mod factorization;
pub mod fpt;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipelines;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::NdTensor;
