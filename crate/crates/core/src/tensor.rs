//! Dense row-major `f64` tensors and the handful of kernels the engine needs.
//!
//! Every reduction sums left to right over its axis, so results are
//! bit-reproducible across runs and machines.
//!
//! | symbol            | shape                        |
//! |-------------------|------------------------------|
//! | hidden states `X` | `n × d_model`                |
//! | `W_q`             | `d_model × n_heads·d_head`   |
//! | `W_k`, `W_v`      | `d_model × n_kv_heads·d_head`|
//! | `Q`               | `n × n_heads·d_head`         |
//! | `K`, `V`          | `n × n_kv_heads·d_head`      |
//! | attention `A`     | `n_layer × n_head × rows × keys` |

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (leading dims are flattened for higher ranks).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Copy of rows `range` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Copy of columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, w],
            data,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// Largest row ℓ2 norm (`‖X‖_{∞,2}`).
    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows())
            .map(|i| l2_norm(self.row(i)))
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        l2_norm(&self.data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `out = x · b` for a row vector `x`. Zero entries of `x` are skipped, which
/// leaves every sum unchanged because `s + 0·b == s` for finite `b`.
pub fn vecmat_into(x: &[f64], b: &Tensor, out: &mut [f64]) {
    let n = b.cols();
    debug_assert_eq!(x.len(), b.rows());
    debug_assert_eq!(out.len(), n);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let brow = &b.data[k * n..(k + 1) * n];
        for (o, bv) in out.iter_mut().zip(brow) {
            *o += xk * bv;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        vecmat_into(a.row(i), b, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::matrix(m, n, out)
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let mut out = x.clone();
    let c = out.cols();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

fn check_kernel(k: usize) -> Result<usize> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!("pool kernel must be odd and positive, got {k}")));
    }
    Ok((k - 1) / 2)
}

/// Centered moving average; windows are clipped at the edges and averaged over
/// the entries that remain.
pub fn avg_pool_1d(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let r = check_kernel(k)?;
    let n = v.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let mut s = 0.0;
            for x in &v[lo..=hi] {
                s += x;
            }
            s / (hi - lo + 1) as f64
        })
        .collect())
}

/// Centered moving maximum with the same edge clipping as [`avg_pool_1d`].
pub fn max_pool_1d(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let r = check_kernel(k)?;
    let n = v.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            v[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Elementwise max over every leading axis; the last axis is kept.
pub fn max_reduce(a: &Tensor) -> Result<Vec<f64>> {
    if a.shape.len() < 2 || a.rows() == 0 {
        return Err(Error::invalid("max_reduce needs at least one leading row"));
    }
    let c = a.cols();
    let mut out = vec![f64::NEG_INFINITY; c];
    for row in a.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Elementwise mean over every leading axis.
pub fn mean_reduce(a: &Tensor) -> Result<Vec<f64>> {
    if a.shape.len() < 2 || a.rows() == 0 {
        return Err(Error::invalid("mean_reduce needs at least one leading row"));
    }
    let c = a.cols();
    let mut out = vec![0.0; c];
    for row in a.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = a.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn desc_then_index(v: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j))
}

/// Indices of the `k` largest entries, lowest index first on ties, returned in
/// ascending index order.
pub fn arg_topk(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, desc_then_index(v));
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
