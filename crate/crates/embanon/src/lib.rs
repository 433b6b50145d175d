//! Speaker anonymization for utterance-level speech embeddings.
//!
//! A pre-trained speech encoder turns an utterance into an `L x d` matrix of
//! per-layer, time-mean-pooled features. This crate converts such embeddings
//! to randomly chosen speaker identities with a trained transformer, offers a
//! Laplace-noise baseline, and measures the resulting privacy/utility
//! trade-off with probe classifiers:
//!
//! - [`numerics`]: float64 tensors, reverse-mode differentiation, SGD/Adam,
//!   and a finite-difference gradient-check oracle.
//! - [`datamodel`]: embedding corpora, `.pemb` file I/O, parallel-pair
//!   sampling, splits, and a synthetic corpus generator.
//! - [`transformer`]: the identity-converting encoder model, its training
//!   loop, and `.ptck` checkpoints.
//! - [`baselines`]: element-wise clipping plus Laplace noise.
//! - [`probes`]: layer-weighted MLP classifiers used both as utility probes
//!   and as the speaker-identification attacker, plus metrics.
//! - [`harness`]: experiment orchestration, reports, and benchmarking.
//! - [`cli`]: the `embanon` command-line interface.

pub mod baselines;
pub mod datamodel;
pub mod harness;
pub mod probes;
pub mod transformer;
pub mod numerics;
pub mod cli;
