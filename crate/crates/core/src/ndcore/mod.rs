//! Dense `f64` arrays and a reverse-mode tape.
//!
//! Values live in [`Array`]. Differentiable computations are recorded on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] returns the gradient of
//! a scalar root with respect to every leaf created with [`Tape::leaf`].
//! Leaves created with [`Tape::constant`] (or produced by [`Tape::detach`])
//! receive no gradient, which is how parameters are frozen during attacks and
//! how sample weights are held fixed during training.
//!
//! Every op checks its output for NaN/Inf and fails instead of propagating.

mod array;
mod gemm;
mod tape;

pub use array::Array;
pub use tape::{ConvGeom, Gradients, Tape, Var};

pub(crate) use tape::argmax_excluding;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: shape mismatch (expected {expected:?}, found {found:?})")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("index {index} out of range for extent {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("non-finite gradient reached node {node}")]
    NonFiniteGradient { node: usize },
    #[error("expected a scalar, found shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward root does not depend on any differentiable leaf")]
    Detached,
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// `log Σ exp(v)` with the max-shift trick.
pub fn logsumexp(v: &[f64]) -> Result<f64, NdError> {
    if v.is_empty() {
        return Err(NdError::Empty("logsumexp"));
    }
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return Err(NdError::NonFinite {
            op: "logsumexp",
            index: v.iter().position(|x| !x.is_finite()).unwrap_or(0),
        });
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Row-wise log-softmax of a plain slice.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>, NdError> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Value copy of `a`. Arrays carry no graph linkage, so this is a plain clone;
/// tape-level detachment is [`Tape::detach`].
pub fn detach(a: &Array) -> Array {
    a.clone()
}
