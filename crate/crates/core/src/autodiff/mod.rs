//! Dense `f64` arrays with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use tape::{concat, Axis, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
