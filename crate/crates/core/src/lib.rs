//! Self-attention sequential recommenders with switchable auto-encoding and
//! auto-regressive training, ranking evaluation, successive-halving search
//! and spectral analysis of attention.

pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod rng;
mod serde_helpers;
pub mod tensor;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
