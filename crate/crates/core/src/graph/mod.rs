//! Attribute graph reasoning: co-occurrence prior, attention blocks and the
//! classification head.

pub mod model;
pub mod ops;
pub mod prior;

pub use model::{total_loss, Forward, GraphBlock, LossParts, Model, ModelConfig, TensorKind, Variant};
pub use prior::{build_prior, corpus_prior, CoOccurrencePrior};
