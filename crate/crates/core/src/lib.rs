//! Spectral analysis of non-contrastive representation learning: filters,
//! synthetic data, training dynamics and an experiment harness.

pub mod data_synth;
pub mod dynamics;
pub mod error;
pub mod filters;
pub mod harness;
pub mod rng;
pub mod spectral;

pub use error::{RdmError, Result};
