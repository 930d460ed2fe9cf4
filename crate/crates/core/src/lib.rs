//! Coarse-to-fine image parsing with a shared encoder and a chain of stacked
//! prediction heads trained under merged-label supervision.

pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
