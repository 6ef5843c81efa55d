//! Small dense/LSTM network core with exact backpropagation through time and Adam.
//!
//! Everything runs in `f64` on plain row-major `Vec`s; networks here are a
//! few dozen units wide, so no BLAS or tensor library is involved.

mod adam;
mod dense;
mod lstm;
mod network;

pub use adam::AdamState;
pub use dense::{Activation, DenseLayer};
pub use lstm::{LstmLayer, LstmStep};
pub use network::{Gradients, QNetwork, RecurrentState, SequenceTrace, StepCache, CHECKPOINT_MAGIC};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("backward called without a matching forward cache ({0})")]
    MissingCache(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<(), NnError> {
    if expected == actual {
        Ok(())
    } else {
        Err(NnError::Shape {
            context,
            expected,
            actual,
        })
    }
}

/// `out += W x` for a row-major `rows × cols` matrix.
#[inline]
pub(crate) fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += Wᵀ d` for a row-major `rows × cols` matrix.
#[inline]
pub(crate) fn matvec_t_add(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for (r, &dr) in d.iter().enumerate().take(rows) {
        if dr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * dr;
        }
    }
}

/// `g += d xᵀ`.
#[inline]
pub(crate) fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += dr * xi;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
