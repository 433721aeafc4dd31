//! # mmseq-core
//!
//! Moment-matching training for autoregressive sequence models.
//!
//! The crate implements a training objective that drives the expectation of a
//! fixed feature vector under the model distribution toward its expectation
//! under the empirical data distribution, alongside the machinery needed to
//! validate every estimator against brute-force oracles:
//!
//! - [`seqmodel`]: a tabular conditional sequence model with ancestral
//!   sampling, exact log-probabilities, analytic gradients, and exhaustive
//!   support enumeration.
//! - [`features`]: prior-knowledge feature functions (length ratio, lexical
//!   dictionary indicators) and empirical feature averages.
//! - [`estimators`]: the moment-matching loss, its exact gradient, three
//!   stochastic gradient estimators (simplistic, economical, jackknife), and
//!   cross-entropy / policy-gradient baselines.
//! - [`verification`]: finite-difference gradient checking, Monte Carlo
//!   unbiasedness reports, and sampler frequency tests.
//! - [`training`]: the CE/MM training loop in alternation or interpolation
//!   mode, with dev-loss tracking and best-checkpoint selection.
//! - [`data`]: parallel corpus loading, synthetic task generation, batching.

pub mod data;
pub mod error;
pub mod estimators;
pub mod features;
pub mod instances;
pub mod rng;
pub mod seqmodel;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use features::{FeatureSet, FeatureVector};
pub use seqmodel::{GradientVector, Sequence, TabularModel, Vocabulary};
