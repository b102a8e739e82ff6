//! Dense tensors, reverse-mode differentiation and the Adam optimizer.
//!
//! Values are held as `f64`. Training rounds parameters to `f32` after each
//! optimizer step (see [`AdamState::with_f32_storage`]) so they are stored in
//! single precision while every reduction accumulates in double precision;
//! gradient checks run on unrounded `f64` values.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_many, finite_diff_check_on, finite_diff_check_params, op_suite, GradCheckReport,
};
pub use graph::{ElementwiseFn, Graph, Var, GELU, RELU, TANH_BOUND};
pub use tensor::{ParamId, ParamStore, Tensor};
