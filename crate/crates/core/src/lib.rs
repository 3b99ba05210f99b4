//! Energy-constrained self-training for unsupervised domain adaptation.

pub mod config;
pub mod datagen;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod pseudolabel;
pub mod rng;
pub mod selftrain;

pub use error::{Error, Result};
