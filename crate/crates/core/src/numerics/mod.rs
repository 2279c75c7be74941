//! Dense matrices with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{matmul, sigmoid, softmax, softmax_in_place as softmax_row, MatRef, Real, Tensor};
