//! Dense tensors, reverse-mode differentiation, Adam, and a finite
//! difference gradient oracle.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check_on, grad_check, relative_error, GradCheckReport};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::sigmoid_scalar;

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
