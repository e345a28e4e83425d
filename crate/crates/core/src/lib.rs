//! Learned CSI feedback compression: autoencoders with ordered (nested
//! dropout) or vector-quantized latents, greedy bit allocation, and model
//! slimming.

pub mod autoencoder;
pub mod bitstream;
pub mod channel;
pub mod error;
pub mod metrics;
pub mod ndq;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod slimming;
pub mod vq;

pub use error::{Error, Result};
