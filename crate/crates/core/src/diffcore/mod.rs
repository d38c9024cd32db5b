//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order. Leaves are either
//! trainable ([`Tape::param`]) or constant ([`Tape::constant`]); gradients
//! flow only into trainable leaves, which is how parameter freezing and
//! stop-gradient are expressed throughout the crate.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, REL_FLOOR};
pub use kernels::{gelu, log_sigmoid, log_softmax_row as log_softmax_in_place, sigmoid, softmax_row as softmax_in_place};
pub use tape::{BinaryOp, ReduceOp, Tape, UnaryOp, Var, MASK_EPS};
pub use tensor::Tensor;
