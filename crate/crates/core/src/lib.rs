//! Variational autoencoders with moment-matching regularizers on the
//! inferred prior, a procedural shapes dataset, and disentanglement metrics.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod trainer;
pub mod traverse;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
