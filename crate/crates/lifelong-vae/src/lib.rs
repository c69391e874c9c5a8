//! Lifelong generative modeling with a student-teacher VAE.
//!
//! A single generative model is trained over a sequence of distributions seen
//! one at a time. After each distribution, the student is frozen and becomes
//! the teacher; the next student trains on a Bernoulli mixture of real data
//! and teacher-generated replay, regularized by a closed-form KL between the
//! student and teacher posteriors on the replayed samples. The latent is
//! factored into a discrete component (one slot per seen distribution, grown
//! at every hand-off) and a continuous component whose information content is
//! penalized so the discrete code carries the distribution identity.
//!
//! The crate ships:
//!
//! - [`distributions`]: reparameterized sampling and closed-form divergences;
//! - [`networks`]: dense encoder/decoder, Glorot init, weight transfer with
//!   latent expansion, checkpoints;
//! - [`objective`]: the training losses (augmented ELBO, posterior
//!   consistency, information-gain penalty, EWC) with exact gradients;
//! - [`lifelong`]: the sequential protocol (replay, mixing, early stopping,
//!   teacher swap);
//! - [`data`]: IDX ingestion, per-class and permuted sequences, synthetic
//!   desk-scale corpora;
//! - [`metrics`]: negative test ELBO and Frechet distance over classifier
//!   features;
//! - [`cli`]: the experiment runner behind the `lvae` binary.
//!
//! Everything is deterministic given a config and a seed.

pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod lifelong;
pub mod metrics;
pub mod networks;
pub mod objective;
pub mod optim;
pub mod seeds;
pub mod tape;

pub use error::{Error, Result};
