//! Dense row-major tensors and the pure kernels the autodiff graph is built from.
//!
//! Kernels are free functions over [`Tensor`] values. They never broadcast
//! except along a leading row dimension (`add_row`), so every shape mismatch
//! surfaces as a [`TensorError`] instead of being silently expanded.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport};
pub use graph::{Gradients, Graph, Precision, Var};
pub use params::{Binding, Grads, Param, ParamSet, Partition};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
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
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor. A 1-D tensor is treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(TensorError::Invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("row() on non-matrix");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let (_, c) = self.dims2().expect("row_mut() on non-matrix");
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// `c += a · b` on raw row-major buffers, `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut c, m, k, n);
    Tensor::new(vec![m, n], c)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Adds a length-`n` row vector to every row of an `m×n` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("add_row", a)?;
    if row.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape.clone(),
            rhs: row.shape.clone(),
        });
    }
    let mut out = a.data.clone();
    for i in 0..m {
        for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
            *o += r;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), a.data.clone()).map_err(|_| TensorError::ShapeMismatch {
        op: "reshape",
        lhs: a.shape.clone(),
        rhs: shape.to_vec(),
    })
}

pub fn gather_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (m, n) = matrix_dims("gather_rows", a)?;
    let mut out = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        if i >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                len: m,
            });
        }
        out.extend_from_slice(&a.data[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![indices.len(), n], out)
}

/// Places row `r` of `a` at row `indices[r]` of a zero `rows×n` matrix.
pub fn scatter_rows(a: &Tensor, indices: &[usize], rows: usize) -> Result<Tensor> {
    let (m, n) = matrix_dims("scatter_rows", a)?;
    if m != indices.len() {
        return Err(TensorError::ShapeMismatch {
            op: "scatter_rows",
            lhs: a.shape.clone(),
            rhs: vec![indices.len()],
        });
    }
    let mut out = vec![0.0; rows * n];
    for (r, &i) in indices.iter().enumerate() {
        if i >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_rows",
                index: i,
                len: rows,
            });
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&a.data[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
    Tensor::new(vec![rows, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

/// Numerically stable softmax of a slice (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan()) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan()) {
        return Err(TensorError::NonFinite { op: "log_softmax" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend(softmax(&a.data[i * n..(i + 1) * n])?);
    }
    Tensor::new(a.shape.clone(), out)
}

pub fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend(log_softmax(&a.data[i * n..(i + 1) * n])?);
    }
    Tensor::new(a.shape.clone(), out)
}

/// Layer normalization of one vector with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: vec![x.len()],
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    if eps <= 0.0 {
        return Err(TensorError::Invalid("layer_norm: eps must be positive".into()));
    }
    let (mean, var) = mean_var(x);
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect())
}

/// Mean and population variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
