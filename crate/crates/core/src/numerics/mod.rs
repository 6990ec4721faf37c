//! Dense f64 matrices, reverse-mode autodiff on a Wengert tape, and Adam.
//!
//! Everything downstream (encoders, the toy LM, training) runs on these
//! kernels, so they are deliberately plain: row-major `Vec<f64>`, nested
//! loops, no SIMD intrinsics, no threading. Reductions always run in
//! ascending index order so repeated runs are bit-identical.

mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::{clip_global_norm, global_norm, Adam};
pub use tape::{NodeId, Tape};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data length {len} does not fill {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: non-finite value (NaN or infinity) rejected")]
    NonFinite { op: &'static str },
    #[error("softmax over an empty vector is undefined")]
    EmptySoftmax,
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("cross-entropy mask selects zero positions")]
    EmptyLossMask,
    #[error("backward target must be 1x1, got {0:?}")]
    LossNotScalar((usize, usize)),
    #[error("backward already ran on this tape; build a fresh tape per step")]
    BackwardTwice,
    #[error("{op}: operands belong to different tapes or node id out of range")]
    ForeignNode { op: &'static str },
    #[error("optimizer was built for {expected} parameters, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Softmax of a 1xN row with max subtraction for stability.
///
/// N = 0 is rejected rather than returning an empty distribution.
pub fn softmax_row(v: &Matrix) -> Result<Matrix> {
    if v.rows() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_row",
            left: v.shape(),
            right: (1, v.cols()),
        });
    }
    if v.cols() == 0 {
        return Err(NumericsError::EmptySoftmax);
    }
    let mut out = v.clone();
    softmax_in_place(out.data_mut());
    Ok(out)
}

/// In-place softmax over one contiguous row. Caller guarantees non-empty.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Matrix of Normal(0, std²) draws via Box-Muller, filled row-major so the
/// result depends only on the rng state.
pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        // 1−u keeps the log argument strictly positive.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        data.push(std * r * theta.cos());
        if data.len() < rows * cols {
            data.push(std * r * theta.sin());
        }
    }
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
