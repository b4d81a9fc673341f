//! Row-major 2-D f32 tensor plus the raw kernels the graph ops dispatch to.

use rand::Rng;

use crate::error::{KvdError, Result};

/// Dense row-major matrix of f32. Scalars are 1x1, vectors 1xN or Nx1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn row(values: &[f32]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f32]) -> Self {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    /// Gaussian init, mean 0, given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Self {
        // Box-Muller; depends only on the rng stream, not on platform libm.
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos() * std as f64) as f32);
            if data.len() < n {
                data.push((r * theta.sin() * std as f64) as f32);
            }
        }
        Tensor::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Appends the rows of `other`; column counts must match.
    pub fn push_rows(&mut self, other: &Tensor) {
        assert_eq!(self.cols, other.cols, "push_rows: column mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Largest absolute element. Zero for empty tensors.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// C = A * B with f64 accumulation, i-k-j loop order.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.rows();
    let n = b.cols();
    let mut out = Tensor::zeros(m, n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row_slice(i);
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let brow = b.row_slice(kk);
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += aik * bv as f64;
            }
        }
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (o, &v) in orow.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    out
}

/// C = A * B^T. Rows of both operands are contiguous, so this is the fast
/// path for attention scores.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += arow[kk] as f64 * brow[kk] as f64;
            }
            out.data[i * n + j] = acc as f32;
        }
    }
    out
}

/// C = A^T * B, accumulated in f64 across the shared row index.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let (_, n) = b.shape();
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let brow = b.row_slice(i);
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let dst = &mut acc[kk * n..(kk + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow.iter()) {
                *d += av * bv as f64;
            }
        }
    }
    Tensor::new(k, n, acc.into_iter().map(|v| v as f32).collect())
}

/// Validates the symmetric broadcast rule: each dim is either equal or 1.
pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Elementwise op with broadcasting per `broadcast_shape`.
pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape()).expect("checked by caller");
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            out.data[r * cols + c] = f(a.at(ra, ca), b.at(rb, cb));
        }
    }
    out
}

/// Reduces `g` (shaped like the broadcast output) back onto `shape` by
/// summing over the broadcast dimensions, in f64.
pub(crate) fn reduce_to_shape(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (rows, cols) = shape;
    let mut acc = vec![0.0f64; rows * cols];
    for r in 0..g.rows() {
        let tr = if rows == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let tc = if cols == 1 { 0 } else { c };
            acc[tr * cols + tc] += g.at(r, c) as f64;
        }
    }
    Tensor::new(rows, cols, acc.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x as f64).exp()) as f32
    } else {
        let e = (x as f64).exp();
        (e / (1.0 + e)) as f32
    }
}

/// Row softmax. With `causal_prefix = Some(p)`, row `i` sees columns
/// `0..=p+i` and the rest are exactly zero.
pub(crate) fn softmax_rows(x: &Tensor, causal_prefix: Option<usize>) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let limit = match causal_prefix {
            Some(p) => (p + r + 1).min(cols),
            None => cols,
        };
        let xin = &x.data[r * cols..r * cols + limit];
        let max = xin.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0f64;
        let orow = &mut out.data[r * cols..(r + 1) * cols];
        for (o, &v) in orow[..limit].iter_mut().zip(xin.iter()) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            denom += e;
        }
        for o in orow[..limit].iter_mut() {
            *o = (*o as f64 / denom) as f32;
        }
    }
    out
}

/// Row RMS normalization: x / sqrt(mean(x^2) + eps).
pub(crate) fn rms_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xin = x.row_slice(r);
        let ms: f64 = xin.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / cols as f64;
        let ri = 1.0 / (ms + eps).sqrt();
        inv.push(ri);
        for (o, &v) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(xin) {
            *o = (v as f64 * ri) as f32;
        }
    }
    (out, inv)
}

pub(crate) fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(KvdError::NonFinite { op: op.to_string() })
    }
}
