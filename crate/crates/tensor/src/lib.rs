//! Minimal dense tensors with tape-based reverse-mode differentiation, an
//! Adam optimizer, and a portable xoshiro256** PRNG.

pub mod adam;
pub mod error;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamStore, Parameter};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
