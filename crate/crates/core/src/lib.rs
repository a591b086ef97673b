//! Radial and mean-field variational Bayesian neural networks.
//!
//! The crate is layered bottom-up:
//!
//! - [`engine`]: dense tensors, reverse-mode differentiation, seeded streams.
//! - [`noise`]: Gaussian, radial and truncated noise plus hyperspherical geometry.
//! - [`layers`]: variational dense layers, multi-head networks, posterior snapshots.
//! - [`elbo`]: entropy and cross-entropy terms and the minibatch objective.
//! - [`diagnostics`]: gradient-variance probes, AUC, referral, calibration, mutual information.
//! - [`harness`]: optimizers, datasets, configuration, training and continual learning.

pub mod diagnostics;
pub mod elbo;
pub mod engine;
mod error;
pub mod harness;
pub mod layers;
pub mod noise;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
