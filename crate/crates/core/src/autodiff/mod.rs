//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).
//!
//! A [`Tape`] records every operation applied to a [`Var`]; [`Tape::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products.
//! Kernels run sequentially with a fixed reduction order, so identical inputs
//! give bit-identical values and gradients.

mod gradcheck;
mod ops;
mod spatial;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, ABS_FLOOR};
pub use ops::{concat_channels, sigmoid, softmax_last_axis};
pub use spatial::ConvGeometry;
pub use tape::{BackwardFn, Gradients, Tape, Var};
