//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value. Operations take and return
//! [`Var`] handles; [`Tape::backward`] produces the gradient of a scalar with
//! respect to every recorded node. There is no broadcasting: elementwise
//! binary ops require identical shapes, and constants are applied through
//! [`Tape::scale`] / [`Tape::add_scalar`].
//!
//! Tapes are single-threaded; independent tapes can run on separate threads.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, max_relative_error, numeric_gradient, relative_error, RELATIVE_ERROR_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
