//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape and are bound as leaves at the start of
//! each pass; [`Tape::backward`] then yields [`Gradients`] for every node.

mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamReport};
pub use optim::{AdamConfig, AdamState};
pub use params::{load_checkpoint, save_checkpoint, ParamId, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Guard used by the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Guard used by divisions (L2 normalization, linear weight normalization).
pub const DIV_EPS: f64 = 1e-8;
