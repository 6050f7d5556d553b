//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The op set is closed: exactly what the expert head needs (affine maps,
//! elementwise arithmetic, concatenation, axis means, pairwise and row
//! softmax, sigmoid, ReLU, cosine similarity, `ln`/`exp`, plus the weighted
//! mean and clamped BCE used for scoring and training). Every op checks its
//! output for NaN/Inf and fails with [`AutodiffError::NonFinite`].

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_kink_aware, relative_error, KinkAwareCheck};
pub use tape::{Tape, Var};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate (zero-norm) vector in {op}")]
    DegenerateVector { op: &'static str },
    #[error("weights sum to zero or less")]
    DegenerateWeights,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Cosine similarity of two plain vectors. Zero-norm input is an error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(Tensor::vector(a.to_vec()));
    let bv = tape.constant(Tensor::vector(b.to_vec()));
    let c = tape.cosine_similarity(av, bv)?;
    Ok(tape.value(c).item())
}

/// `exp(s⁺/τ) / (exp(s⁺/τ) + exp(s⁻/τ))`, stable for large arguments.
pub fn softmax_pair(s_plus: f64, s_minus: f64, tau: f64) -> Result<f64, AutodiffError> {
    if !(tau > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("temperature must be positive, got {}", tau)));
    }
    let p = tape::softmax_pair_value(s_plus, s_minus, tau);
    if !p.is_finite() {
        return Err(AutodiffError::NonFinite { op: "softmax_pair" });
    }
    Ok(p)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    tape::sigmoid(x)
}
