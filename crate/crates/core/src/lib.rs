//! Faithfulness evaluation for token-level feature attributions.

pub mod attribution;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod perturbation;

pub use error::{Error, Result, TransportError};
