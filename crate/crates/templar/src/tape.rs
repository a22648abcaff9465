//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records a DAG of tensor operations as they execute; values are
//! computed eagerly so the forward result is always available. Calling
//! [`Tape::backward`] on a scalar node propagates gradients to every node that
//! feeds it. The op set is exactly what the models in this crate need — GRU
//! steps, attention, segmental log-space dynamic programs, and convolution via
//! windowed affine maps — nothing more.
//!
//! Conventions:
//! - a vector is a `1 x n` [`Mat`], a scalar is `1 x 1`;
//! - `-inf` is a first-class value in log-space programs. `logsumexp` of an
//!   all-`-inf` vector is `-inf` and propagates zero gradient, so impossible
//!   paths never poison the backward pass with NaN.

use crate::math::{self, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b` elementwise with scalar constants; only the scale is
    /// needed after the eager forward pass.
    AffineScalar(Var, f64),
    /// `W x + b`; `x` and `b` are vectors.
    Affine(Var, Var, Var),
    MatVec(Var, Var),
    /// `A B^T` for row-major `A: m x k`, `B: n x k`.
    MatMulNT(Var, Var),
    Row(Var, usize),
    /// Flat slice `[offset, offset + len)` of a vector.
    Slice(Var, usize),
    Concat(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Dot(Var, Var),
    SumMany(Vec<Var>),
    /// Scalar pick `x[i]` from a vector.
    Index(Var, usize),
    LogSumExp(Var),
    LogSoftmax(Var),
    Softmax(Var),
    /// Row-wise log-softmax of a matrix.
    LogSoftmaxRows(Var),
    /// `sum_i coeffs[i] * vecs[i]` with a vector of coefficients.
    Lincomb { coeffs: Var, vecs: Vec<Var> },
    /// Elementwise max across same-shape inputs; winners fixed at forward.
    MaxMany { srcs: Vec<Var>, argmax: Vec<u32> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records operations and their results for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Register an input (parameter or constant).
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, data: &[f64]) -> Var {
        self.leaf(Mat::vector(data.to_vec()))
    }

    pub fn leaf_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::scalar(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.len(), vb.len());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let m = Mat { rows: va.rows, cols: va.cols, data };
        self.push(m, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.len(), vb.len());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let m = Mat { rows: va.rows, cols: va.cols, data };
        self.push(m, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.len(), vb.len());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let m = Mat { rows: va.rows, cols: va.cols, data };
        self.push(m, Op::Mul(a, b))
    }

    /// Elementwise `a * x + b` with scalar constants `a`, `b`.
    pub fn affine_scalar(&mut self, x: Var, a: f64, b: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| a * t + b).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::AffineScalar(x, a))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine_scalar(x, a, 0.0)
    }

    /// `W x + b` for matrix `W` and vectors `x`, `b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let out = {
            let vw = &self.nodes[w.0].value;
            let vx = &self.nodes[x.0].value;
            let vb = &self.nodes[b.0].value;
            Mat::vector(vw.affine(&vx.data, &vb.data))
        };
        self.push(out, Op::Affine(w, x, b))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let out = {
            let vw = &self.nodes[w.0].value;
            let vx = &self.nodes[x.0].value;
            Mat::vector(vw.matvec(&vx.data))
        };
        self.push(out, Op::MatVec(w, x))
    }

    /// `A B^T`; with `a == b` this is the Gram matrix and gradients from both
    /// roles accumulate into the shared input.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            debug_assert_eq!(va.cols, vb.cols);
            let mut m = Mat::zeros(va.rows, vb.rows);
            for i in 0..va.rows {
                for j in 0..vb.rows {
                    m.set(i, j, math::dot(va.row(i), vb.row(j)));
                }
            }
            m
        };
        self.push(out, Op::MatMulNT(a, b))
    }

    /// Row `i` of a matrix node, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let out = Mat::vector(self.nodes[x.0].value.row(i).to_vec());
        self.push(out, Op::Row(x, i))
    }

    /// Flat sub-vector `[offset, offset + len)`.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Var {
        let out = Mat::vector(self.nodes[x.0].value.data[offset..offset + len].to_vec());
        self.push(out, Op::Slice(x, offset))
    }

    /// Concatenate vectors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(Mat::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| math::sigmoid(t)).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| t.tanh()).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| t.max(0.0)).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::Relu(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| t.ln()).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::Ln(x))
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&t| t.clamp(lo, hi)).collect();
        let m = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(m, Op::Clamp(x, lo, hi))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let out = math::dot(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        self.push(Mat::scalar(out), Op::Dot(a, b))
    }

    /// Elementwise sum of same-shape nodes.
    pub fn sum_many(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let first = &self.nodes[parts[0].0].value;
        let mut m = Mat { rows: first.rows, cols: first.cols, data: vec![0.0; first.len()] };
        for &p in parts {
            for (o, x) in m.data.iter_mut().zip(&self.nodes[p.0].value.data) {
                *o += x;
            }
        }
        self.push(m, Op::SumMany(parts.to_vec()))
    }

    /// Scalar `x[i]`.
    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let out = self.nodes[x.0].value.data[i];
        self.push(Mat::scalar(out), Op::Index(x, i))
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let out = math::logsumexp(&self.nodes[x.0].value.data);
        self.push(Mat::scalar(out), Op::LogSumExp(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = Mat::vector(math::log_softmax(&self.nodes[x.0].value.data));
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = Mat::vector(math::softmax(&self.nodes[x.0].value.data));
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax of a matrix node.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let mut m = Mat::zeros(vx.rows, vx.cols);
        for i in 0..vx.rows {
            let row = math::log_softmax(vx.row(i));
            m.row_mut(i).copy_from_slice(&row);
        }
        self.push(m, Op::LogSoftmaxRows(x))
    }

    /// `sum_i coeffs[i] * vecs[i]` where `coeffs` is a vector node.
    pub fn lincomb(&mut self, coeffs: Var, vecs: &[Var]) -> Var {
        let out = {
            let c = &self.nodes[coeffs.0].value;
            debug_assert_eq!(c.len(), vecs.len());
            let dim = self.nodes[vecs[0].0].value.len();
            let mut acc = vec![0.0; dim];
            for (i, &v) in vecs.iter().enumerate() {
                let ci = c.data[i];
                for (a, x) in acc.iter_mut().zip(&self.nodes[v.0].value.data) {
                    *a += ci * x;
                }
            }
            Mat::vector(acc)
        };
        self.push(out, Op::Lincomb { coeffs, vecs: vecs.to_vec() })
    }

    /// Elementwise max across same-shape nodes. Ties go to the earliest input,
    /// fixed at forward time, so the backward routing is deterministic.
    pub fn max_many(&mut self, srcs: &[Var]) -> Var {
        debug_assert!(!srcs.is_empty());
        let first = &self.nodes[srcs[0].0].value;
        let (rows, cols) = (first.rows, first.cols);
        let mut best = first.data.clone();
        let mut argmax = vec![0u32; best.len()];
        for (si, &s) in srcs.iter().enumerate().skip(1) {
            for (k, x) in self.nodes[s.0].value.data.iter().enumerate() {
                if *x > best[k] {
                    best[k] = *x;
                    argmax[k] = si as u32;
                }
            }
        }
        self.push(Mat { rows, cols, data: best }, Op::MaxMany { srcs: srcs.to_vec(), argmax })
    }

    /// Reverse pass from a scalar node. Returns one gradient buffer per node;
    /// untouched nodes stay `None`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Mat::scalar(1.0));

        for idx in (0..=root.0).rev() {
            // Take the buffer out so parents can be accumulated into `g`
            // mutably; it is restored at the end of the iteration.
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, &gout.data, &self.nodes);
                    accumulate(&mut g, *b, &gout.data, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, &gout.data, &self.nodes);
                    let neg: Vec<f64> = gout.data.iter().map(|x| -x).collect();
                    accumulate(&mut g, *b, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> =
                        gout.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> =
                        gout.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut g, *a, &ga, &self.nodes);
                    accumulate(&mut g, *b, &gb, &self.nodes);
                }
                Op::AffineScalar(x, a) => {
                    let gx: Vec<f64> = gout.data.iter().map(|t| a * t).collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Affine(w, x, b) => {
                    self.back_linear(&mut g, *w, *x, &gout.data);
                    accumulate(&mut g, *b, &gout.data, &self.nodes);
                }
                Op::MatVec(w, x) => {
                    self.back_linear(&mut g, *w, *x, &gout.data);
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, n, k) = (va.rows, vb.rows, va.cols);
                    // dA = G B, dB = G^T A.
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let go = gout.data[i * n + j];
                            if go == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                da[i * k + t] += go * vb.data[j * k + t];
                                db[j * k + t] += go * va.data[i * k + t];
                            }
                        }
                    }
                    accumulate(&mut g, *a, &da, &self.nodes);
                    accumulate(&mut g, *b, &db, &self.nodes);
                }
                Op::Row(x, i) => {
                    let cols = self.nodes[x.0].value.cols;
                    accumulate_at(&mut g, *x, i * cols, &gout.data, &self.nodes);
                }
                Op::Slice(x, offset) => {
                    accumulate_at(&mut g, *x, *offset, &gout.data, &self.nodes);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        accumulate(&mut g, p, &gout.data[off..off + len], &self.nodes);
                        off += len;
                    }
                }
                Op::Sigmoid(x) => {
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(go, o)| go * o * (1.0 - o))
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Tanh(x) => {
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(go, o)| go * (1.0 - o * o))
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Relu(x) => {
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(go, o)| if *o > 0.0 { *go } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Ln(x) => {
                    let vx = &self.nodes[x.0].value;
                    let gx: Vec<f64> =
                        gout.data.iter().zip(&vx.data).map(|(go, t)| go / t).collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = &self.nodes[x.0].value;
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(go, t)| if *t > *lo && *t < *hi { *go } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Dot(a, b) => {
                    let go = gout.data[0];
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = vb.data.iter().map(|t| go * t).collect();
                    let gb: Vec<f64> = va.data.iter().map(|t| go * t).collect();
                    accumulate(&mut g, *a, &ga, &self.nodes);
                    accumulate(&mut g, *b, &gb, &self.nodes);
                }
                Op::SumMany(parts) => {
                    for &p in parts {
                        accumulate(&mut g, p, &gout.data, &self.nodes);
                    }
                }
                Op::Index(x, i) => {
                    let vx_len = self.nodes[x.0].value.len();
                    let mut gx = vec![0.0; vx_len];
                    gx[*i] = gout.data[0];
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::LogSumExp(x) => {
                    let out = node.value.data[0];
                    if out > f64::NEG_INFINITY {
                        let go = gout.data[0];
                        let vx = &self.nodes[x.0].value;
                        let gx: Vec<f64> =
                            vx.data.iter().map(|t| go * (t - out).exp()).collect();
                        accumulate(&mut g, *x, &gx, &self.nodes);
                    }
                    // An all -inf input has no gradient anywhere.
                }
                Op::LogSoftmax(x) => {
                    let gsum: f64 = gout.data.iter().sum();
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(go, o)| go - o.exp() * gsum)
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Softmax(x) => {
                    let s = math::dot(&gout.data, &node.value.data);
                    let gx: Vec<f64> = gout
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(go, o)| o * (go - s))
                        .collect();
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::LogSoftmaxRows(x) => {
                    let cols = node.value.cols;
                    let mut gx = vec![0.0; node.value.len()];
                    for r in 0..node.value.rows {
                        let go = &gout.data[r * cols..(r + 1) * cols];
                        let o = node.value.row(r);
                        let gsum: f64 = go.iter().sum();
                        for c in 0..cols {
                            gx[r * cols + c] = go[c] - o[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut g, *x, &gx, &self.nodes);
                }
                Op::Lincomb { coeffs, vecs } => {
                    let cvals = self.nodes[coeffs.0].value.data.clone();
                    let mut gc = vec![0.0; vecs.len()];
                    for (i, &v) in vecs.iter().enumerate() {
                        gc[i] = math::dot(&gout.data, &self.nodes[v.0].value.data);
                        let gv: Vec<f64> = gout.data.iter().map(|t| cvals[i] * t).collect();
                        accumulate(&mut g, v, &gv, &self.nodes);
                    }
                    accumulate(&mut g, *coeffs, &gc, &self.nodes);
                }
                Op::MaxMany { srcs, argmax } => {
                    for (si, &s) in srcs.iter().enumerate() {
                        let mut gs = vec![0.0; gout.data.len()];
                        let mut any = false;
                        for (k, &win) in argmax.iter().enumerate() {
                            if win as usize == si {
                                gs[k] = gout.data[k];
                                any = true;
                            }
                        }
                        if any {
                            accumulate(&mut g, s, &gs, &self.nodes);
                        }
                    }
                }
            }
            g[idx] = Some(gout);
        }
        Grads { g }
    }

    /// Shared backward for `W x (+ b)`: `dW += g x^T`, `dx += W^T g`.
    fn back_linear(&self, g: &mut [Option<Mat>], w: Var, x: Var, gout: &[f64]) {
        let vw = &self.nodes[w.0].value;
        let vx = &self.nodes[x.0].value;
        let mut gw = vec![0.0; vw.len()];
        let mut gx = vec![0.0; vx.len()];
        for i in 0..vw.rows {
            let go = gout[i];
            if go == 0.0 {
                continue;
            }
            let row = vw.row(i);
            let grow = &mut gw[i * vw.cols..(i + 1) * vw.cols];
            for j in 0..vw.cols {
                grow[j] += go * vx.data[j];
                gx[j] += go * row[j];
            }
        }
        accumulate(g, w, &gw, &self.nodes);
        accumulate(g, x, &gx, &self.nodes);
    }
}

fn accumulate(g: &mut [Option<Mat>], v: Var, contrib: &[f64], nodes: &[Node]) {
    accumulate_at(g, v, 0, contrib, nodes)
}

fn accumulate_at(g: &mut [Option<Mat>], v: Var, offset: usize, contrib: &[f64], nodes: &[Node]) {
    let val = &nodes[v.0].value;
    let slot = g[v.0].get_or_insert_with(|| Mat::zeros(val.rows, val.cols));
    for (o, x) in slot.data[offset..offset + contrib.len()].iter_mut().zip(contrib) {
        *o += x;
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the root w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.g[v.0].as_ref()
    }

    /// Dense gradient for `v` (zeros when no path reached it).
    pub fn dense(&self, v: Var, rows: usize, cols: usize) -> Mat {
        match &self.g[v.0] {
            Some(m) => m.clone(),
            None => Mat::zeros(rows, cols),
        }
    }
}
