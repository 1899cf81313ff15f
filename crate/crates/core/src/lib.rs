//! Gaussian-process-gated hierarchical mixtures of experts (GPHME).
//!
//! A GPHME is a fixed, complete binary tree. Every inner node is a gate whose
//! routing logit is a random-feature Gaussian process, `z = φ(x)ᵀw`, and every
//! leaf is an expert whose class logits (or regression outputs) are random-feature
//! GPs of the same input. Gate weights, expert weights and the spectral frequencies
//! behind the feature maps all carry factorized Gaussian variational posteriors,
//! fitted by maximizing a penalized evidence lower bound with reparameterized,
//! minibatched Monte-Carlo gradients.
//!
//! Module map:
//!
//! * [`features`]: exact kernels and their random-feature expansions.
//! * [`variational`]: Gaussian posteriors, reparameterized draws, KL to N(0, I).
//! * [`model`]: tree topology, forward pass, objectives, branching penalty, PELBO.
//! * [`train`]: analytic gradients, Adam, the training loop.
//! * [`data`]: CSV ingestion, standardization, fold plans, synthetic data.
//! * [`eval`]: metrics, Welch's t-test, fold-level reports.
//! * [`checkpoint`]: versioned JSON checkpoints.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod rng;
pub mod train;
pub mod variational;

pub use error::{GphmeError, Result};
