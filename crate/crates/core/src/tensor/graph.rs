//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Nodes are appended in creation order, which is already a topological order,
//! so the backward sweep simply walks the tape in reverse. Gradient
//! contributions are accumulated in that fixed order, which makes backward
//! bit-reproducible for a given forward.

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision for node values. `F32` rounds every forward result to
/// single precision; gradients are always accumulated in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    RepeatRow(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanCols(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    detached: bool,
}

/// A single-threaded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    macs: u64,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by every `matmul` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_detached(&self, v: Var) -> bool {
        self.nodes[v.0].detached
    }

    fn round(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        t
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            detached: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        let value = self.round(value);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let value = self.round(value);
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = self.round(value);
        self.push_raw(value, Op::Leaf, false)
    }

    /// Same value as `v`, with every gradient path through it severed.
    pub fn detach(&mut self, v: Var) -> Var {
        if self.nodes[v.0].detached {
            return v;
        }
        let value = self.nodes[v.0].value.clone();
        let out = self.push_raw(value, Op::Leaf, false);
        self.nodes[out.0].detached = true;
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        self.macs += (m * k * n) as u64;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::add(self.value(a), self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::sub(self.value(a), self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::mul(self.value(a), self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = super::add_row(self.value(a), self.value(row))?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = super::transpose(self.value(a))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = super::reshape(self.value(a), shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = super::gather_rows(self.value(a), indices)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let out = super::scatter_rows(self.value(a), indices, rows)?;
        self.push("scatter_rows", out, Op::ScatterRows(a, indices.to_vec()), &[a])
    }

    /// Stacks a length-`n` vector `count` times into a `count×n` matrix.
    pub fn repeat_row(&mut self, row: Var, count: usize) -> Result<Var> {
        let r = self.value(row);
        let n = r.len();
        let mut data = Vec::with_capacity(n * count);
        for _ in 0..count {
            data.extend_from_slice(r.data());
        }
        let out = Tensor::new(vec![count, n], data)?;
        self.push("repeat_row", out, Op::RepeatRow(row), &[row])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = super::gelu(self.value(a));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(a))?;
        self.push("softmax", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::log_softmax_rows(self.value(a))?;
        self.push("log_softmax", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm: eps must be positive".into()));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mean, var) = super::mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `m×n → m×1`, the mean of each row.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let out: Vec<f64> = (0..m).map(|i| t.row(i).iter().sum::<f64>() / n as f64).collect();
        self.push("mean_cols", Tensor::new(vec![m, 1], out)?, Op::MeanCols(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("ln", out, Op::Ln(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        self.push("slice_cols", out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = av.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.requires_grad(*row) {
                    let n = self.value(*row).len();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(grads, *row, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                // g is n×m
                let mut d = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        d[c * n + r] = g[r * m + c];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for (x, &y) in d[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows(a, idx) => {
                let n = self.value(*a).dims2()?.1;
                let mut d = Vec::with_capacity(idx.len() * n);
                for &dst in idx {
                    d.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::RepeatRow(row) => {
                let n = self.value(*row).len();
                let mut d = vec![0.0; n];
                for chunk in g.chunks(n) {
                    d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
                self.accumulate(grads, *row, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gv, &xv)| gv * super::gelu_grad_scalar(xv)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.dims2()?.1;
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.dims2()?.1;
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let gs = &g[r * n..(r + 1) * n];
                    let total: f64 = gs.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gs[j] - y[r * n + j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let m = inv_std.len();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gs = &g[r * n..(r + 1) * n];
                        let hs = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gs.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / len as f64; len]);
            }
            Op::MeanCols(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for gv in g.iter().take(m) {
                    d.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else if xv < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| 2.0 * xv * gv).collect());
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2()?;
                let len = node.value.dims2()?.1;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2()?.1;
                let m = node.value.dims2()?.0;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2()?.1;
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn linear_form_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = g.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0, 5.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn detach_semantics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![2.0, -3.0]));
        let y = g.param(Tensor::vector(vec![5.0, 7.0]));
        let dx = g.detach(x);
        assert_eq!(g.value(dx), g.value(x));
        assert_eq!(g.detach(dx), dx);
        let p = g.mul(dx, y).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_an_error_state() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0]));
        assert!(matches!(g.ln(x), Err(TensorError::NonFinite { op: "ln" })));
    }

    #[test]
    fn f32_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        assert_eq!(g.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn matmul_counts_macs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![3, 4]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 60);
    }

    /// Builds `f(x)` on a fresh graph and compares backward to central differences.
    fn check_unary(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let out = f(&mut g, x).unwrap();
        let l = if g.value(out).len() == 1 { out } else { g.sum(out).unwrap() };
        // weight outputs so sum-invariant ops (softmax) still get a non-trivial check
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(x).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; x0.len()]);
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let out = f(&mut g, x).unwrap();
                g.value(out).data().iter().sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(close(analytic[i], fd, 1e-6), "coord {i}: {} vs {}", analytic[i], fd);
        }
    }

    fn sample_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let data = (0..r * c)
            .map(|i| (((i as u64 + 1) * 2654435761 ^ seed) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let w = sample_matrix(4, 3, 7);
        let v = sample_matrix(3, 4, 11);
        check_unary(sample_matrix(3, 4, 1), |g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv)
        });
        check_unary(sample_matrix(3, 4, 2), |g, x| {
            let t = g.transpose(x)?;
            let wv = g.constant(w.clone());
            let y = g.mul(t, wv)?;
            g.square(y)
        });
        check_unary(sample_matrix(3, 4, 3), |g, x| {
            let y = g.gelu(x)?;
            let vv = g.constant(v.clone());
            g.mul(y, vv)
        });
        check_unary(sample_matrix(3, 4, 4), |g, x| {
            let y = g.softmax_rows(x)?;
            let vv = g.constant(v.clone());
            g.mul(y, vv)
        });
        check_unary(sample_matrix(3, 4, 5), |g, x| {
            let y = g.log_softmax_rows(x)?;
            let vv = g.constant(v.clone());
            g.mul(y, vv)
        });
        check_unary(sample_matrix(3, 4, 6), |g, x| {
            let gamma = g.constant(Tensor::vector(vec![1.5, -0.5, 2.0, 0.7]));
            let beta = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
            let y = g.layer_norm_rows(x, gamma, beta, 1e-5)?;
            let vv = g.constant(v.clone());
            g.mul(y, vv)
        });
        check_unary(sample_matrix(3, 4, 8), |g, x| {
            let a = g.gather_rows(x, &[2, 0, 2])?;
            let b = g.scatter_rows(a, &[1, 3, 0], 4)?;
            let c = g.slice_cols(b, 1, 2)?;
            let d = g.concat_cols(&[c, b])?;
            g.square(d)
        });
        check_unary(Tensor::vector(vec![0.3, -1.2, 2.0]), |g, x| {
            let r = g.repeat_row(x, 3)?;
            let m = g.mean_cols(r)?;
            let a = g.abs(m)?;
            let s = g.square(r)?;
            let t = g.mean(s)?;
            let rs = g.reshape(a, &[3])?;
            let u = g.sum(rs)?;
            g.add(t, u)
        });
        check_unary(sample_matrix(2, 3, 9).map(|x| x.abs() + 0.5), |g, x| {
            let l = g.ln(x)?;
            let b = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let y = g.add_row(l, b)?;
            let z = g.sub(y, x)?;
            g.scale(z, 3.0)
        });
    }

    #[test]
    fn layer_norm_affine_params_get_gradients() {
        let mut g = Graph::new();
        let x = g.constant(sample_matrix(2, 3, 3));
        let gamma = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let beta = g.param(Tensor::vector(vec![0.0; 3]));
        let y = g.layer_norm_rows(x, gamma, beta, 1e-5).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(beta).unwrap().data(), &[2.0, 2.0, 2.0]);
        // columns of xhat in each row sum to zero, so dgamma sums to ~0
        let dg: f64 = grads.get(gamma).unwrap().data().iter().sum();
        assert!(dg.abs() < 1e-9);
    }
}
