//! Dual-stream micro-expression recognition: a retention-based temporal
//! branch over onset/apex difference frames fused with a shallow
//! patch-transformer spatial branch.

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod scalar;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{FusionMode, ModelConfig, TsfModel};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = TsfModel<f32>;
pub type Model64 = TsfModel<f64>;
