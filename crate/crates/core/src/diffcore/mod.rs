//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Only the primitives the network needs are provided. Each one records a
//! closed-form vector-Jacobian product on a [`Graph`]; [`gradient_check`]
//! compares those against central differences.

mod adam;
mod check;
mod checkpoint;
mod graph;
mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use check::{gradient_check, nudge_away, relative_error, GradCheck};
pub use checkpoint::{Array, Checkpoint};
pub use graph::{Backward, Gradients, Graph, Var};
pub use ops::{BatchStats, NormMode};
pub use tensor::{ParamSet, Real, Tensor};
