//! Learning and verifying event-triggered controllers.

pub mod baselines;
pub mod envsim;
pub mod error;
pub mod neuralnet;
pub mod policy;
pub mod retrainer;
pub mod seeds;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
