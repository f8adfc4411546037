//! Dense row-major `f32` arrays and the handful of kernels a decoder-only
//! forward pass needs.
//!
//! Every kernel allocates its output and accumulates in a fixed order, so two
//! runs on the same platform produce bit-identical results.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape covers the data exactly.
    ///
    /// Zero extents are allowed so that an empty token sequence can be
    /// represented as `[0 × d]`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Dimension("tensor shape must have rank >= 1".into()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of vectors along the last axis.
    pub fn n_rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            self.data.len() / d
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let d = self.last_dim().max(1);
        self.data.chunks(d)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Copies rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let d = self.last_dim();
        Tensor {
            shape: vec![end - start, d],
            data: self.data[start * d..end * d].to_vec(),
        }
    }

    /// Element-wise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Dimension(format!(
            "{what} must be a matrix, got shape {other:?}"
        ))),
    }
}

/// `a[m×k] · b[k×n]`. Each output element accumulates its `k` products
/// left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "left operand")?;
    let (k2, n) = matrix_dims(b, "right operand")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `x[m×k] · wᵀ` for a weight stored as `[out × in]` = `[n×k]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(x, "input")?;
    let (n, k2) = matrix_dims(w, "weight")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "linear input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let x_row = &x.data[i * k..(i + 1) * k];
        for j in 0..n {
            let w_row = &w.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (a, b) in x_row.iter().zip(w_row) {
                acc += a * b;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax of one slice in place: subtract the max, exponentiate, normalize.
pub fn softmax_in_place(slice: &mut [f32]) {
    let max = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in slice.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in slice.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one slice, max-subtracted.
pub fn log_softmax(slice: &[f32]) -> Vec<f32> {
    let max = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = slice.iter().map(|v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    slice.iter().map(|v| v - max - log_sum).collect()
}

pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = out.last_dim();
    if d > 0 {
        for slice in out.data.chunks_mut(d) {
            softmax_in_place(slice);
        }
    }
    out
}

/// `v / sqrt(mean(v²) + eps) ⊙ gain` for every vector along the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::Dimension(format!(
            "rms_norm gain {:?} does not match last extent {d} of {:?}",
            gain.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for v in out.data.chunks_mut(d) {
        let mean_sq = v.iter().map(|a| a * a).sum::<f32>() / d as f32;
        let denom = (mean_sq + eps).sqrt();
        for (a, g) in v.iter_mut().zip(&gain.data) {
            // zero input with eps = 0 stays zero rather than NaN
            *a = if denom > 0.0 { *a / denom * g } else { 0.0 };
        }
    }
    Ok(out)
}

/// Rotary embedding over `[T × H × hd]`: coordinate pair `(2i, 2i+1)` of a
/// token at position `p` is rotated by `p · base^(-2i/hd)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
    let [t, h, hd] = match x.shape() {
        [t, h, hd] => [*t, *h, *hd],
        other => {
            return Err(Error::Dimension(format!(
                "rope expects [tokens x heads x head_dim], got {other:?}"
            )))
        }
    };
    if hd % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even head_dim, got {hd}")));
    }
    if positions.len() != t {
        return Err(Error::Dimension(format!(
            "rope got {} positions for {t} tokens",
            positions.len()
        )));
    }
    let inv_freq: Vec<f64> = (0..hd / 2)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / hd as f64))
        .collect();
    let mut out = x.clone();
    for (ti, &pos) in positions.iter().enumerate() {
        let rot: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let angle = pos as f64 * f;
                (angle.cos() as f32, angle.sin() as f32)
            })
            .collect();
        for hi in 0..h {
            let off = (ti * h + hi) * hd;
            let head = &mut out.data[off..off + hd];
            for (pair, &(cos, sin)) in head.chunks_exact_mut(2).zip(&rot) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * cos - b * sin;
                pair[1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// Tanh approximation of GeLU.
pub fn gelu_tanh(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `cap · tanh(x / cap)`.
pub fn softcap(x: f32, cap: f32) -> f32 {
    cap * (x / cap).tanh()
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f32]) -> f32 {
    a.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}
