//! Generative autoencoder zoo on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, the tape, RNG, gradient checks
//! - [`nn`]: parameter store, dense/MADE layers, encoder/decoder networks
//! - [`stats`]: Gaussian densities, KL, MMD, GMM/EM, k-means, Fréchet distance
//! - [`flows`]: planar, radial, IAF and MAF transforms
//! - [`models`]: the 19 autoencoder objectives behind one configuration type
//! - [`samplers`]: ex-post latent density estimators used for generation
//! - [`training`]: Adam, plateau scheduler, training loop, checkpoints
//! - [`data`]: IDX reader/writer, synthetic datasets, splits
//! - [`evaluation`]: the downstream benchmark tasks
//! - [`pipelines`]: benchmark plans, grid execution and report rendering

pub mod data;
pub mod error;
pub mod evaluation;
pub mod flows;
pub mod models;
pub mod nn;
pub mod pipelines;
pub mod samplers;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Rng, Tensor, Var};
