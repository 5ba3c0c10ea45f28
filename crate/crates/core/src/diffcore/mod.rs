//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Only the operations the detector graph needs are provided. Values are
//! computed in `f64`; parameters and features are stored as binary32 at rest
//! and widened when bound onto a tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_smooth, relative_error, GradCheckReport};
pub use tape::{Axis, ElementwiseKind, Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
