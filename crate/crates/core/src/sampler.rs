//! Adaptive token sampler: scores every token, draws the visible set without
//! replacement from the resulting categorical distribution, and provides the
//! score-function loss that trains it.
//!
//! The sampler reads a detached copy of the tokens, so its loss never reaches
//! the autoencoder parameters, and the draw itself is not differentiated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{visible_count, MaskSpec};
use crate::model::transformer::{self, num_heads};
use crate::tensor::{Binding, Graph, ParamSet, Partition, Precision, Tensor, Var};
use crate::tokenizer::PatchGeometry;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Transformer block(s) over all tokens, then `Linear(d, 1)`.
    #[default]
    Mha,
    /// `Linear(d, d)` then `Linear(d, 1)` applied to each token independently.
    Mlp,
}

/// How the per-token probabilities enter the sampling loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingLossForm {
    /// `−Σ log(P_i) · err_i`
    #[default]
    Log,
    /// `−Σ P_i · err_i`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub depth: usize,
    /// Width of the sampler blocks; equal to the token width by default.
    pub dim: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

pub fn init_sampler<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &SamplerConfig, rng: &mut R) -> Result<()> {
    let part = Partition::Sampler;
    match cfg.kind {
        SamplerKind::Mha => {
            if cfg.dim != cfg.embed_dim {
                transformer::init_linear(ps, "sampler.in", cfg.embed_dim, cfg.dim, part, rng)?;
            }
            for i in 0..cfg.depth {
                transformer::init_block(ps, &format!("sampler.blk{i}"), cfg.dim, cfg.mlp_ratio, part, rng)?;
            }
            transformer::init_layer_norm(ps, "sampler.norm", cfg.dim, part)?;
            transformer::init_linear(ps, "sampler.head", cfg.dim, 1, part, rng)?;
        }
        SamplerKind::Mlp => {
            transformer::init_linear(ps, "sampler.fc", cfg.embed_dim, cfg.embed_dim, part, rng)?;
            transformer::init_linear(ps, "sampler.head", cfg.embed_dim, 1, part, rng)?;
        }
    }
    Ok(())
}

/// Sampler outputs on the graph, each `N × 1`.
#[derive(Clone, Copy, Debug)]
pub struct ScoredTokens {
    pub probs: Var,
    pub log_probs: Var,
}

/// `P = softmax(Linear(MHA(X)))` over all `N` tokens. `tokens` must already
/// carry positional encoding; they are detached before entering the network.
pub fn score_tokens(g: &mut Graph, b: &Binding, cfg: &SamplerConfig, tokens: Var) -> Result<ScoredTokens> {
    let x = g.detach(tokens);
    let n = g.value(x).dims2()?.0;
    let z = match cfg.kind {
        SamplerKind::Mha => {
            let mut z = if cfg.dim != cfg.embed_dim {
                transformer::linear(g, b, "sampler.in", x)?
            } else {
                x
            };
            for i in 0..cfg.depth {
                z = transformer::block(g, b, &format!("sampler.blk{i}"), z, num_heads(cfg.dim))?;
            }
            transformer::layer_norm(g, b, "sampler.norm", z)?
        }
        SamplerKind::Mlp => transformer::linear(g, b, "sampler.fc", x)?,
    };
    let logits = transformer::linear(g, b, "sampler.head", z)?;
    let row = g.reshape(logits, &[1, n])?;
    let p = g.softmax_rows(row)?;
    let lp = g.log_softmax_rows(row)?;
    Ok(ScoredTokens {
        probs: g.reshape(p, &[n, 1])?,
        log_probs: g.reshape(lp, &[n, 1])?,
    })
}

/// Categorical distribution over the `N` tokens of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub probs: Vec<f64>,
    pub geometry: PatchGeometry,
}

impl ProbabilityMap {
    pub fn new(probs: Vec<f64>, geometry: PatchGeometry) -> Result<Self> {
        Self::with_tolerance(probs, geometry, 1e-10)
    }

    fn with_tolerance(probs: Vec<f64>, geometry: PatchGeometry, tol: f64) -> Result<Self> {
        if probs.len() != geometry.num_tokens() {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities for {} tokens",
                probs.len(),
                geometry.num_tokens()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "not a strictly positive simplex vector (sum {sum})"
            )));
        }
        Ok(Self { probs, geometry })
    }

    /// Reads `P` off the graph. In 32-bit mode each entry carries a relative
    /// rounding error up to 2⁻²⁴, so the sum is only checked to `N·2⁻²³`.
    pub fn from_graph(g: &Graph, scored: &ScoredTokens, geometry: PatchGeometry) -> Result<Self> {
        let probs = g.value(scored.probs).data().to_vec();
        let tol = match g.precision() {
            Precision::F64 => 1e-10,
            Precision::F32 => probs.len() as f64 * f32::EPSILON as f64,
        };
        Self::with_tolerance(probs, geometry, tol)
    }

    pub fn uniform(geometry: PatchGeometry) -> Self {
        let n = geometry.num_tokens();
        Self {
            probs: vec![1.0 / n as f64; n],
            geometry,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `k` distinct indices drawn one at a time, each from the remaining
/// probability mass renormalized. Returned in draw order.
pub fn draw_without_replacement<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > probs.len() {
        return Err(Error::InvalidArgument(format!("cannot draw {k} of {}", probs.len())));
    }
    let mut w = probs.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            acc += wi;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        // Rounding can leave u at the very top of the range; the last
        // positive-weight index is then the correct pick.
        let i = pick.ok_or_else(|| Error::InvalidArgument("no probability mass left to draw from".into()))?;
        w[i] = 0.0;
        out.push(i);
    }
    Ok(out)
}

/// Visible set of `floor(N(1−ρ))` tokens drawn from `P` without replacement.
pub fn sample_visible<R: Rng + ?Sized>(p: &ProbabilityMap, rho: f64, rng: &mut R) -> Result<MaskSpec> {
    let n = p.len();
    let nv = visible_count(n, rho)?;
    let mask = MaskSpec::from_visible(n, draw_without_replacement(&p.probs, nv, rng)?)?;
    debug_assert!(mask.check_invariants().is_ok());
    Ok(mask)
}

/// `ln P_i` under the original (not renormalized) distribution.
pub fn log_prob(p: &ProbabilityMap, indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            p.probs
                .get(i)
                .map(|v| v.ln())
                .ok_or_else(|| Error::InvalidArgument(format!("token index {i} out of range {}", p.len())))
        })
        .collect()
}

/// `L_S = −Σ_{i∈I_m} log(P_i) · err_i` (or the linear form).
///
/// `per_token_err` is `|I_m| × 1` and must not carry gradient. When nothing
/// is masked the loss is the constant 0.
pub fn sampling_loss(
    g: &mut Graph,
    scored: &ScoredTokens,
    masked: &[usize],
    per_token_err: Var,
    form: SamplingLossForm,
) -> Result<Var> {
    if g.requires_grad(per_token_err) {
        return Err(Error::InvalidArgument(
            "sampling loss needs detached reconstruction errors".into(),
        ));
    }
    if masked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (rows, cols) = g.value(per_token_err).dims2()?;
    if rows != masked.len() || cols != 1 {
        return Err(Error::InvalidArgument(format!(
            "per-token errors are {rows}x{cols}, expected {}x1",
            masked.len()
        )));
    }
    if g.value(per_token_err).data().iter().any(|&e| e < 0.0) {
        return Err(Error::InvalidArgument("per-token errors must be non-negative".into()));
    }
    let src = match form {
        SamplingLossForm::Log => scored.log_probs,
        SamplingLossForm::Linear => scored.probs,
    };
    let picked = g.gather_rows(src, masked)?;
    let weighted = g.mul(picked, per_token_err)?;
    let s = g.sum(weighted)?;
    Ok(g.neg(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::oracle;
    use crate::tokenizer::token_grid_geometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom_n(n: usize) -> PatchGeometry {
        token_grid_geometry([1, n, 1, 1], [1, 1, 1]).unwrap()
    }

    fn cfg(d: usize) -> SamplerConfig {
        SamplerConfig {
            kind: SamplerKind::Mha,
            depth: 1,
            dim: d,
            embed_dim: d,
            mlp_ratio: 4,
        }
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        init_sampler(&mut ps, &cfg(8), &mut rng).unwrap();
        ps.get_mut("sampler.head.w").unwrap().value = Tensor::zeros(vec![8, 1]);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = g.constant(transformer::trunc_normal(&mut rng, vec![6, 8], 1.0));
        let s = score_tokens(&mut g, &b, &cfg(8), x).unwrap();
        for &p in g.value(s.probs).data() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_has_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        init_sampler(&mut ps, &cfg(4), &mut rng).unwrap();
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = g.constant(transformer::trunc_normal(&mut rng, vec![1, 4], 1.0));
        let s = score_tokens(&mut g, &b, &cfg(4), x).unwrap();
        assert_eq!(g.value(s.probs).data(), &[1.0]);
    }

    #[test]
    fn score_tokens_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (kind, d_s) in [(SamplerKind::Mha, 8), (SamplerKind::Mha, 4), (SamplerKind::Mlp, 8)] {
            let c = SamplerConfig { kind, depth: 1, dim: d_s, embed_dim: 8, mlp_ratio: 4 };
            let mut ps = ParamSet::new();
            init_sampler(&mut ps, &c, &mut rng).unwrap();
            for (_, p) in ps.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|x| *x *= 30.0);
            }
            let x = transformer::trunc_normal(&mut rng, vec![5, 8], 1.0);
            let mut g = Graph::new();
            let b = ps.bind(&mut g);
            let xv = g.constant(x.clone());
            let s = score_tokens(&mut g, &b, &c, xv).unwrap();

            let xm = oracle::mat(&x);
            let z = match kind {
                SamplerKind::Mha => {
                    let z = if d_s != 8 { oracle::linear(&ps, "sampler.in", &xm) } else { xm };
                    let z = oracle::block(&ps, "sampler.blk0", &z, 1);
                    oracle::layer_norm(&ps, "sampler.norm", &z)
                }
                SamplerKind::Mlp => oracle::linear(&ps, "sampler.fc", &xm),
            };
            let logits: Vec<f64> = oracle::linear(&ps, "sampler.head", &z).into_iter().map(|r| r[0]).collect();
            let expect = oracle::softmax(&logits);
            for (a, e) in g.value(s.probs).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
            for (a, e) in g.value(s.log_probs).data().iter().zip(&expect) {
                assert!((a - e.ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_prob_examples() {
        let p = ProbabilityMap::uniform(geom_n(4));
        for v in log_prob(&p, &[0, 3]).unwrap() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(log_prob(&p, &[4]).is_err());
        let tiny = 1e-9;
        let p = ProbabilityMap::new(vec![1.0 - 3.0 * tiny, tiny, tiny, tiny], geom_n(4)).unwrap();
        let l = log_prob(&p, &[0]).unwrap()[0];
        assert!(l.is_finite() && l.abs() < 1e-8);
    }

    #[test]
    fn probability_map_validation() {
        assert!(ProbabilityMap::new(vec![0.5, 0.6], geom_n(2)).is_err());
        assert!(ProbabilityMap::new(vec![1.0, 0.0], geom_n(2)).is_err());
        assert!(ProbabilityMap::new(vec![0.5], geom_n(2)).is_err());
    }

    #[test]
    fn f32_probabilities_are_accepted() {
        let n = 64;
        let logits: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.param(Tensor::matrix(1, n, logits).unwrap());
        let p = g.softmax_rows(x).unwrap();
        let lp = g.log_softmax_rows(x).unwrap();
        let scored = ScoredTokens {
            probs: g.reshape(p, &[n, 1]).unwrap(),
            log_probs: g.reshape(lp, &[n, 1]).unwrap(),
        };
        assert!(ProbabilityMap::from_graph(&g, &scored, geom_n(n)).is_ok());
    }

    fn loss_graph(p: &[f64], masked: &[usize], err: &[f64], detach: bool) -> (Graph, Var, Result<Var>) {
        let mut g = Graph::new();
        let logits = g.param(Tensor::matrix(1, p.len(), p.iter().map(|x| x.ln()).collect()).unwrap());
        let pr = g.softmax_rows(logits).unwrap();
        let lp = g.log_softmax_rows(logits).unwrap();
        let n = p.len();
        let scored = ScoredTokens {
            probs: g.reshape(pr, &[n, 1]).unwrap(),
            log_probs: g.reshape(lp, &[n, 1]).unwrap(),
        };
        let e = g.param(Tensor::matrix(err.len(), 1, err.to_vec()).unwrap());
        let e = if detach { g.detach(e) } else { e };
        let l = sampling_loss(&mut g, &scored, masked, e, SamplingLossForm::Log);
        (g, logits, l)
    }

    #[test]
    fn sampling_loss_examples() {
        let (g, _, l) = loss_graph(&[0.5, 0.5], &[0, 1], &[1.0, 3.0], true);
        let v = g.value(l.unwrap()).item();
        assert!((v - 2.7726).abs() < 1e-4);
        assert!((v + 4.0 * 0.5f64.ln()).abs() < 1e-12);

        let (g, logits, l) = loss_graph(&[0.2, 0.3, 0.5], &[0, 2], &[0.0, 0.0], true);
        let l = l.unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(logits).unwrap().data().iter().all(|&x| x == 0.0));

        let (_, _, l) = loss_graph(&[0.5, 0.5], &[0, 1], &[1.0, 3.0], false);
        assert!(l.is_err());
        let (_, _, l) = loss_graph(&[0.5, 0.5], &[0, 1], &[1.0, -3.0], true);
        assert!(l.is_err());
    }

    #[test]
    fn empty_masked_set_gives_zero_loss() {
        let (g, _, l) = loss_graph(&[1.0], &[], &[], true);
        assert_eq!(g.value(l.unwrap()).item(), 0.0);
    }

    #[test]
    fn sample_visible_counts_and_reproducibility() {
        let full = token_grid_geometry([3, 16, 224, 224], [2, 16, 16]).unwrap();
        let p = ProbabilityMap::uniform(full);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let m = sample_visible(&p, 0.95, &mut r1).unwrap();
        assert_eq!((m.n_visible, m.masked.len()), (78, 1490));
        assert_eq!(sample_visible(&p, 0.95, &mut r2).unwrap(), m);
        assert!(sample_visible(&p, 1.2, &mut r1).is_err());
    }

    #[test]
    fn first_draw_frequency() {
        let p = ProbabilityMap::new(vec![0.97, 0.01, 0.01, 0.01], geom_n(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| sample_visible(&p, 0.75, &mut rng).unwrap().visible == vec![0])
            .count();
        assert!((hits as f64 / draws as f64 - 0.97).abs() < 0.005);
    }
}
