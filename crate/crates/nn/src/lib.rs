//! Minimal double-precision reverse-mode autodiff with the layers and
//! optimizer needed by the motif pipeline.
//!
//! Everything runs in `f64` so that finite-difference gradient checks are
//! meaningful at tight tolerances.

pub mod graph;
mod linalg;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{Bound, ParamBuilder, ParamId, ParamSet};
pub use tensor::Tensor;
