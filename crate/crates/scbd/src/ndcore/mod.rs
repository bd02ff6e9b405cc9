//! Dense arrays and a reverse-mode autodiff tape.
//!
//! Values are stored as 32-bit floats; every kernel that reduces (matrix
//! products, sums, means, softmax denominators, norms) accumulates in 64-bit
//! before rounding back, which keeps the tape's gradients close enough to
//! true derivatives for a 1e-4 finite-difference gate. The op set is exactly
//! what the objective and the models need: matmul, elementwise arithmetic,
//! `exp`/`log`/`abs`/GELU, numerically stabilised row log-softmax, row L2
//! normalisation, reductions, reshape/transpose, strided conv / transposed
//! conv, and `stop_gradient`.
//!
//! A [`Tape`] owns the recorded graph; node handles are cheap [`NodeId`]s.
//! [`Tape::backward`] walks the recording once in reverse and returns a
//! [`Gradients`] table. [`grad_check`] re-executes the same recording in
//! 64-bit to compare analytic gradients against central finite differences.

mod array;
mod gradcheck;
mod kernels;
mod scalar;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use tape::{Gradients, NodeId, Tape};

/// Errors raised by array construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NdError {
    /// Two operand shapes that were required to agree did not.
    #[error("{op}: shape mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand had a shape the op cannot accept.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// An op produced a NaN or infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    /// Anything else an op rejects (bad arguments, degenerate inputs).
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
