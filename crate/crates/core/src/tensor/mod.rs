//! Dense f64 tensors, reverse-mode differentiation, the optimizer and the
//! parameter checkpoint format.

pub mod checkpoint;
mod dense;
pub mod graph;
pub mod optim;
mod params;

pub use dense::Tensor;
pub use graph::{Gradients, Graph, Var, MASK_FILL};
pub use optim::{Adam, AdamConfig, Schedule};
pub use params::{ParamId, ParamStore, Parameter};
