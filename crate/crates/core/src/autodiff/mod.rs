//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the primitives the gated training objective needs are provided. Every
//! primitive and every composite loss is covered by [`gradcheck_all`], which
//! compares analytic gradients against central finite differences.

mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    check_gradient, gradcheck_all, gradcheck_with_fault, registered_checks, GradReport, Probe,
    FD_STEP,
};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Default guard for [`Graph::l2_normalize`].
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("kernel width must be odd, got {0}")]
    EvenKernel(usize),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("degenerate embedding: norm {norm:e} is not above {eps:e}")]
    DegenerateNorm { norm: f64, eps: f64 },
    #[error("domain error: {0}")]
    Domain(String),
}
