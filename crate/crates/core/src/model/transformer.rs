//! Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Binding, Graph, ParamSet, Partition, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn num_heads(d: usize) -> usize {
    (d / 64).max(1)
}

pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    partition: Partition,
    rng: &mut R,
) -> Result<()> {
    ps.insert(format!("{prefix}.w"), trunc_normal(rng, vec![d_in, d_out], INIT_STD), partition, true)?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]), partition, false)?;
    Ok(())
}

pub fn linear(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, bias)?)
}

pub fn init_layer_norm(ps: &mut ParamSet, prefix: &str, d: usize, partition: Partition) -> Result<()> {
    ps.insert(format!("{prefix}.g"), Tensor::full(vec![d], 1.0), partition, false)?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]), partition, false)?;
    Ok(())
}

pub fn layer_norm(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(&format!("{prefix}.g"))?;
    let beta = b.var(&format!("{prefix}.b"))?;
    Ok(g.layer_norm_rows(x, gamma, beta, LN_EPS)?)
}

pub fn init_block<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    partition: Partition,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(ps, &format!("{prefix}.ln1"), d, partition)?;
    init_linear(ps, &format!("{prefix}.attn.qkv"), d, 3 * d, partition, rng)?;
    init_linear(ps, &format!("{prefix}.attn.proj"), d, d, partition, rng)?;
    init_layer_norm(ps, &format!("{prefix}.ln2"), d, partition)?;
    init_linear(ps, &format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, partition, rng)?;
    init_linear(ps, &format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, partition, rng)?;
    Ok(())
}

/// Multi-head self-attention over the rows of `x`.
pub fn attention(g: &mut Graph, b: &Binding, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let d = g.value(x).dims2()?.1;
    let hd = d / heads;
    let qkv = linear(g, b, &format!("{prefix}.qkv"), x)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * hd, hd)?;
        let k = g.slice_cols(qkv, d + h * hd, hd)?;
        let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, b, &format!("{prefix}.proj"), cat)
}

pub fn block(g: &mut Graph, b: &Binding, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, b, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    Ok(g.add(x, h)?)
}

/// Zeroes the output projections so the block reduces to its skip path.
pub fn zero_residual_branches(ps: &mut ParamSet, prefix: &str) -> Result<()> {
    for name in ["attn.proj.w", "attn.proj.b", "mlp.fc2.w", "mlp.fc2.b"] {
        let p = ps.get_mut(&format!("{prefix}.{name}"))?;
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(())
}
