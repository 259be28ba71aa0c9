//! Differentiable tensor graph, parameter storage and layer primitives.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Grads, Graph, RetentionForm, Var};
pub use params::{ParamId, ParamStore};
