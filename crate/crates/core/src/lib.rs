//! Generative semi-supervised classification with normalizing flows.
//!
//! An invertible coupling-layer flow maps data to a latent space where each
//! class owns a Gaussian component. Exact likelihoods for labeled and
//! unlabeled data train the flow jointly; the Bayes posterior over components
//! classifies. The crate also ships the comparison baselines (kNN, logistic
//! regression, MLP, consistency-trained MLP, graph label spreading),
//! evaluation and calibration tooling, and dataset plumbing.
//!
//! Modules:
//! - [`diff`]: closed-op-set reverse-mode differentiation and Adam
//! - [`flow`]: affine coupling layers with analytic inverse and log-det
//! - [`gmm`]: latent class-conditional Gaussian mixture
//! - [`train`]: losses and training loops (joint, consistency, EM)
//! - [`data`]: generators, delimited files, splits, standardization
//! - [`baselines`]: comparison classifiers and label spreading
//! - [`eval`]: metrics, calibration, boundary distances, report emission
//! - [`checkpoint`]: bit-exact model serialization

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gmm;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
