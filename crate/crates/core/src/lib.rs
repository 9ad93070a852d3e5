//! Conditional invertible neural networks.
//!
//! A conditional INN is a stack of invertible stages (conditional affine
//! coupling blocks, channel permutations, orthogonal wavelet downsampling and
//! channel splits) whose coupling subnetworks receive features computed from
//! a condition by an ordinary feed-forward conditioning network. The whole
//! model is trained jointly by maximum likelihood and sampled by running the
//! flow in reverse.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: `f64` tensors, a dynamic autodiff tape and Adam.
//! - [`wavelet`]: Haar downsampling.
//! - [`blocks`]: coupling blocks, subnetworks and permutations.
//! - [`conditioning`]: the conditioning network and its feature pyramid.
//! - [`flow`]: stage assembly, exact log-density, inversion and the loss.
//! - [`training`]: training loop, dequantization and checkpoints.
//! - [`latent`]: latent-space manipulation and PCA.
//! - [`cli`]: file formats, toy tasks, metrics and the command line.

pub mod blocks;
pub mod cli;
pub mod conditioning;
pub mod error;
pub mod flow;
pub mod graph;
pub mod latent;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::Cinn;
pub use numerics::Tensor;
