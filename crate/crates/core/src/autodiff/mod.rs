//! Reverse-mode differentiation over fp64 tensors.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use gradcheck::{
    check_param_gradients, check_tape_gradients, finite_diff_check, finite_diff_check_at, GradCheck, ParamCheck,
};
pub use params::{init, Gradients, Graph, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
