//! Dense matrix/vector helpers and numerically careful primitives.
//!
//! All model arithmetic runs in `f64`. Parameters are kept on the
//! `f32`-representable grid (see [`quantize_f32`]) so that single-precision
//! checkpoint storage round-trips bit-identically.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix. A vector is a `1 x n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    /// 1 x n matrix wrapping a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    /// 1 x 1 matrix holding a scalar.
    pub fn scalar(x: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a 1 x 1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `out = self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    /// `out = self * x + b`.
    pub fn affine(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.rows);
        let mut out = self.matvec(x);
        for (o, bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
        out
    }
}

/// log(sum(exp(xs))) computed against the running maximum.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Numerically stable log-softmax. Entries of `-inf` stay `-inf`.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Snap every value to the nearest `f32`-representable number.
///
/// Applied after initialization and after every optimizer step so that
/// storing parameters as `f32` loses nothing.
pub fn quantize_f32(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = *x as f32 as f64;
    }
}

/// Uniform init in `[-scale, scale]`, pre-quantized to the f32 grid.
pub fn uniform_init<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
    quantize_f32(&mut v);
    v
}

/// Cosine similarity; zero whenever either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
