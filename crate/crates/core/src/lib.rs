//! Attribute-aware graph reasoning for multi-label per-frame action
//! detection over precomputed vision-language frame embeddings.

pub mod attributes;
pub mod checks;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Mode, Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;

pub type Model64 = graph::Model<f64>;
pub type Model32 = graph::Model<f32>;
