//! Few-shot customization of a pretrained generator from exemplar sketches.
//!
//! The generator is split into a trainable latent mapping network and a frozen
//! synthesis network. Fine-tuning drives the generator's output, translated
//! into the sketch domain by a frozen translator, toward a handful of user
//! sketches under an adversarial loss, optionally regularized in image space
//! (a second adversarial loss against the source data) or in weight space
//! (L1 drift penalty). The crate also ships the evaluation stack (FID, PPL,
//! precision/recall, chamfer matching), latent-shift baselines, latent-space
//! applications, and a CLI.

pub mod autodiff;
pub mod error;
pub mod nn;

pub mod model;
pub mod sketch;

pub mod loss;
pub mod train;

pub mod eval;

pub mod baseline;

pub mod apps;

pub mod data;

pub mod config;
pub mod runs;

pub use error::{Error, Result};
