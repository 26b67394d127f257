//! Defense-in-depth RF fingerprint identification.
//!
//! Synthetic LoRa transmitters ([`rf_sim`]) feed a fixed STFT–Mel–log front
//! end ([`frontend`]). A residual classifier ([`classifier`]) is trained with
//! trigger, adversarial-trigger and feature-signature watermarks
//! ([`watermark`]), a convolutional VAE ([`guard`]) flags off-distribution
//! inputs, and [`attacks`] stress both. [`harness`] runs the whole protocol
//! and computes the metrics.

pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod guard;
pub mod harness;
pub mod nn;
pub mod rf_sim;
pub mod seed;
pub mod watermark;

pub use error::{Error, Result};
