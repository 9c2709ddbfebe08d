//! Product-quantized autoencoder toolkit.
//!
//! - [`tensor`]: dense f64 arrays, reverse-mode autodiff, AdamW.
//! - [`quantize`]: VQ / PQ / RVQ / FSQ, EMA codebooks, composed indices, usage metrics.
//! - [`model`]: frame-stacking MLP autoencoder with dual decoding.
//! - [`train`]: loss, lambda schedule, training loop, evaluation.
//! - [`data`]: synthetic corpus, feature files, manifests, checkpoints, batching.
//! - [`cli`]: the `pqvae` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
