//! The asymmetric masked autoencoder with an adaptive token sampler.
//!
//! The encoder sees only visible tokens. The decoder sees all `N` positions:
//! projected encoder features at visible indices, the shared mask token at
//! masked indices, each plus its own positional row.

pub mod check;
pub mod transformer;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{baseline_mask, MaskSpec, MaskStrategy};
use crate::sampler::{self, ProbabilityMap, SamplerConfig, SamplerKind, SamplingLossForm};
use crate::tensor::{self, Binding, Graph, ParamSet, Partition, Tensor, Var};
use crate::tokenizer::{
    self, patch_normalize, positional_encoding, positional_table, token_grid_geometry, PatchGeometry,
    PosEncodingKind, TargetPatches, VideoTensor, PATCH_NORM_EPS,
};
use transformer::{init_block, init_layer_norm, init_linear, num_heads, trunc_normal, INIT_STD};

pub const MASK_TOKEN: &str = "dec.mask_token";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLossKind {
    #[default]
    Mse,
    L1,
}

/// Architecture of the whole model. Everything needed to rebuild the
/// parameter shapes lives here, so a checkpoint can verify it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// `(C, T, H, W)`
    pub video: [usize; 4],
    /// `(t, h, w)`
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
    pub sampler: SamplerKind,
    pub sampler_depth: usize,
    /// Zero means "same as `embed_dim`".
    pub sampler_dim: usize,
    pub pos_encoding: PosEncodingKind,
    pub recon_loss: ReconLossKind,
    pub sampling_loss: SamplingLossForm,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ArchConfig {
    /// 3×8×32×32 clips, 2×8×8 cubes, 64 tokens.
    pub fn toy() -> Self {
        Self {
            video: [3, 8, 32, 32],
            patch: [2, 8, 8],
            embed_dim: 64,
            enc_depth: 4,
            dec_dim: 32,
            dec_depth: 2,
            mlp_ratio: 4,
            sampler: SamplerKind::Mha,
            sampler_depth: 1,
            sampler_dim: 0,
            pos_encoding: PosEncodingKind::Flat,
            recon_loss: ReconLossKind::Mse,
            sampling_loss: SamplingLossForm::Log,
        }
    }

    /// Eight tokens and tiny widths, small enough for finite differences.
    pub fn gradcheck_toy() -> Self {
        Self {
            video: [3, 4, 16, 16],
            patch: [2, 8, 8],
            embed_dim: 16,
            enc_depth: 2,
            dec_dim: 8,
            dec_depth: 1,
            ..Self::toy()
        }
    }

    /// ViT-B encoder on 16×224×224 clips with a 4-block, 384-wide decoder.
    pub fn vit_b() -> Self {
        Self {
            video: [3, 16, 224, 224],
            patch: [2, 16, 16],
            embed_dim: 768,
            enc_depth: 12,
            dec_dim: 384,
            dec_depth: 4,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "gradcheck" | "tiny" => Ok(Self::gradcheck_toy()),
            "vit-b" => Ok(Self::vit_b()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        token_grid_geometry(self.video, self.patch)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            depth: self.sampler_depth,
            dim: if self.sampler_dim == 0 { self.embed_dim } else { self.sampler_dim },
            embed_dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let s = self.sampler_config();
        let checks = [
            (self.embed_dim % 2 == 0 && self.embed_dim > 0, "embed_dim must be even and positive"),
            (self.dec_dim % 2 == 0 && self.dec_dim > 0, "dec_dim must be even and positive"),
            (self.mlp_ratio > 0, "mlp_ratio must be positive"),
            (self.embed_dim % num_heads(self.embed_dim) == 0, "embed_dim not divisible by head count"),
            (self.dec_dim % num_heads(self.dec_dim) == 0, "dec_dim not divisible by head count"),
            (s.dim % num_heads(s.dim) == 0, "sampler_dim not divisible by head count"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Pipeline stages, recorded in call order when tracing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokenize,
    PosEncode,
    Score,
    Sample,
    GatherVisible,
    Encode,
    Assemble,
    Decode,
    ReconstructionLoss,
    SamplingLoss,
    CombinedLoss,
    Backward,
    OptimizerStep,
}

impl Stage {
    /// Per-video order for the adaptive sampler, ending with the backward pass.
    pub const ADAPTIVE_ORDER: [Stage; 12] = [
        Stage::Tokenize,
        Stage::PosEncode,
        Stage::Score,
        Stage::Sample,
        Stage::GatherVisible,
        Stage::Encode,
        Stage::Assemble,
        Stage::Decode,
        Stage::ReconstructionLoss,
        Stage::SamplingLoss,
        Stage::CombinedLoss,
        Stage::Backward,
    ];
}

/// Per-masked-token errors and their mean, both on the graph.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionResult {
    /// `|I_m| × 1`; carries gradient to the autoencoder.
    pub per_token_err: Var,
    pub loss: Var,
}

/// How one forward pass chooses its mask and weights the sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub strategy: MaskStrategy,
    pub rho: f64,
    pub lambda: f64,
}

pub struct ForwardOutput {
    pub predictions: Var,
    pub recon: ReconstructionResult,
    pub sampling_loss: Var,
    pub loss: Var,
    pub mask: MaskSpec,
    /// Present only for the adaptive strategy.
    pub probs: Option<ProbabilityMap>,
    pub scored: Option<sampler::ScoredTokens>,
    pub targets: TargetPatches,
}

#[derive(Clone, Debug)]
pub struct AdaMae {
    config: ArchConfig,
    geometry: PatchGeometry,
    pos: Tensor,
    dec_pos: Tensor,
}

impl AdaMae {
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let pos = positional_table(config.pos_encoding, &geometry, config.embed_dim)?;
        let dec_pos = positional_encoding(geometry.num_tokens(), config.dec_dim)?;
        Ok(Self {
            config,
            geometry,
            pos,
            dec_pos,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn positional(&self) -> &Tensor {
        &self.pos
    }

    pub fn decoder_positional(&self) -> &Tensor {
        &self.dec_pos
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let c = &self.config;
        let mae = Partition::Mae;
        let mut ps = ParamSet::new();
        ps.insert(
            tokenizer::EMBED_WEIGHT,
            trunc_normal(rng, vec![self.geometry.cube_size(), c.embed_dim], INIT_STD),
            mae,
            true,
        )?;
        ps.insert(tokenizer::EMBED_BIAS, Tensor::zeros(vec![c.embed_dim]), mae, false)?;
        sampler::init_sampler(&mut ps, &c.sampler_config(), rng)?;
        for i in 0..c.enc_depth {
            init_block(&mut ps, &format!("enc.{i}"), c.embed_dim, c.mlp_ratio, mae, rng)?;
        }
        init_linear(&mut ps, "dec.proj", c.embed_dim, c.dec_dim, mae, rng)?;
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let f_m = (0..c.dec_dim).map(|_| normal.sample(rng)).collect();
        ps.insert(MASK_TOKEN, Tensor::vector(f_m), mae, false)?;
        for i in 0..c.dec_depth {
            init_block(&mut ps, &format!("dec.{i}"), c.dec_dim, c.mlp_ratio, mae, rng)?;
        }
        init_layer_norm(&mut ps, "dec.norm", c.dec_dim, mae)?;
        init_linear(&mut ps, "dec.head", c.dec_dim, self.geometry.cube_size(), mae, rng)?;
        Ok(ps)
    }

    /// Position-encoded tokens for every cube of `video`.
    pub fn embed(&self, g: &mut Graph, b: &Binding, video: &VideoTensor) -> Result<Var> {
        let mut batch = tokenizer::tokenize(g, b, video, &self.geometry)?;
        let pos = g.constant(self.pos.clone());
        batch.add_positional(g, pos)?;
        Ok(batch.tokens)
    }

    /// Pre-norm transformer stack over the visible tokens only.
    pub fn encode(&self, g: &mut Graph, b: &Binding, x_visible: Var) -> Result<Var> {
        let heads = num_heads(self.config.embed_dim);
        let mut x = x_visible;
        for i in 0..self.config.enc_depth {
            x = transformer::block(g, b, &format!("enc.{i}"), x, heads)?;
        }
        Ok(x)
    }

    /// `N × d_dec` decoder input: `proj(F_v) + pos` at visible rows,
    /// `f_m + pos` at masked rows.
    pub fn assemble_decoder_input(&self, g: &mut Graph, b: &Binding, f_v: Var, mask: &MaskSpec) -> Result<Var> {
        let n = self.geometry.num_tokens();
        let rows = g.value(f_v).dims2()?.0;
        if rows != mask.n_visible || mask.num_tokens() != n {
            return Err(Error::InvalidArgument(format!(
                "{rows} encoded rows for {} visible of {} tokens (model has {n})",
                mask.n_visible,
                mask.num_tokens()
            )));
        }
        let proj = transformer::linear(g, b, "dec.proj", f_v)?;
        let mut full = g.scatter_rows(proj, &mask.visible, n)?;
        if !mask.masked.is_empty() {
            let f_m = b.var(MASK_TOKEN)?;
            let fill = g.repeat_row(f_m, mask.masked.len())?;
            let fill = g.scatter_rows(fill, &mask.masked, n)?;
            full = g.add(full, fill)?;
        }
        let pos = g.constant(self.dec_pos.clone());
        Ok(g.add(full, pos)?)
    }

    /// Decoder blocks, final norm and the pixel-cube head.
    pub fn decode(&self, g: &mut Graph, b: &Binding, f: Var) -> Result<Var> {
        let heads = num_heads(self.config.dec_dim);
        let mut x = f;
        for i in 0..self.config.dec_depth {
            x = transformer::block(g, b, &format!("dec.{i}"), x, heads)?;
        }
        let x = transformer::layer_norm(g, b, "dec.norm", x)?;
        transformer::linear(g, b, "dec.head", x)
    }

    /// One video through the full pipeline, in the order of [`Stage::ADAPTIVE_ORDER`]
    /// (baseline strategies skip scoring).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        b: &Binding,
        video: &VideoTensor,
        opts: &ForwardOptions,
        rng: &mut R,
        trace: &mut Vec<Stage>,
    ) -> Result<ForwardOutput> {
        let mut batch = tokenizer::tokenize(g, b, video, &self.geometry)?;
        trace.push(Stage::Tokenize);
        let pos = g.constant(self.pos.clone());
        batch.add_positional(g, pos)?;
        trace.push(Stage::PosEncode);
        let x = batch.tokens;

        let (scored, probs, mask) = if opts.strategy == MaskStrategy::Adaptive {
            let scored = sampler::score_tokens(g, b, &self.config.sampler_config(), x)?;
            let p = ProbabilityMap::from_graph(g, &scored, self.geometry)?;
            trace.push(Stage::Score);
            let mask = sampler::sample_visible(&p, opts.rho, rng)?;
            trace.push(Stage::Sample);
            (Some(scored), Some(p), mask)
        } else {
            let mask = baseline_mask(opts.strategy, &self.geometry, opts.rho, rng)?;
            trace.push(Stage::Sample);
            (None, None, mask)
        };
        self.forward_rest(g, b, video, x, scored, probs, mask, opts.lambda, trace)
    }

    /// Like [`AdaMae::forward`] but with a caller-chosen mask. When
    /// `adaptive` is set the sampler still scores the tokens and the
    /// sampling loss is computed for `mask`.
    pub fn forward_with_mask(
        &self,
        g: &mut Graph,
        b: &Binding,
        video: &VideoTensor,
        mask: MaskSpec,
        adaptive: bool,
        lambda: f64,
        trace: &mut Vec<Stage>,
    ) -> Result<ForwardOutput> {
        if mask.num_tokens() != self.geometry.num_tokens() {
            return Err(Error::InvalidArgument(format!(
                "mask over {} tokens for a {}-token model",
                mask.num_tokens(),
                self.geometry.num_tokens()
            )));
        }
        let x = self.embed(g, b, video)?;
        trace.extend([Stage::Tokenize, Stage::PosEncode]);
        let (scored, probs) = if adaptive {
            let scored = sampler::score_tokens(g, b, &self.config.sampler_config(), x)?;
            let p = ProbabilityMap::from_graph(g, &scored, self.geometry)?;
            trace.push(Stage::Score);
            (Some(scored), Some(p))
        } else {
            (None, None)
        };
        trace.push(Stage::Sample);
        self.forward_rest(g, b, video, x, scored, probs, mask, lambda, trace)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_rest(
        &self,
        g: &mut Graph,
        b: &Binding,
        video: &VideoTensor,
        x: Var,
        scored: Option<sampler::ScoredTokens>,
        probs: Option<ProbabilityMap>,
        mask: MaskSpec,
        lambda: f64,
        trace: &mut Vec<Stage>,
    ) -> Result<ForwardOutput> {
        let x_v = g.gather_rows(x, &mask.visible)?;
        trace.push(Stage::GatherVisible);
        let f_v = self.encode(g, b, x_v)?;
        trace.push(Stage::Encode);
        let f = self.assemble_decoder_input(g, b, f_v, &mask)?;
        trace.push(Stage::Assemble);
        let predictions = self.decode(g, b, f)?;
        trace.push(Stage::Decode);

        let targets = patch_normalize(video, &self.geometry, PATCH_NORM_EPS)?;
        let recon = reconstruction_loss(g, predictions, &targets, &mask.masked, self.config.recon_loss)?;
        trace.push(Stage::ReconstructionLoss);

        let sampling_loss = match &scored {
            Some(scored) => {
                let err = g.detach(recon.per_token_err);
                let l = sampler::sampling_loss(g, scored, &mask.masked, err, self.config.sampling_loss)?;
                trace.push(Stage::SamplingLoss);
                l
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        let loss = combined_loss(g, recon.loss, sampling_loss, lambda)?;
        trace.push(Stage::CombinedLoss);
        Ok(ForwardOutput {
            predictions,
            recon,
            sampling_loss,
            loss,
            mask,
            probs,
            scored,
            targets,
        })
    }

    /// Sampler distribution for `video` without building a training graph.
    pub fn probability_map(&self, ps: &ParamSet, video: &VideoTensor) -> Result<ProbabilityMap> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = self.embed(&mut g, &b, video)?;
        let scored = sampler::score_tokens(&mut g, &b, &self.config.sampler_config(), x)?;
        ProbabilityMap::from_graph(&g, &scored, self.geometry)
    }

    /// Mean over all `N` encoder outputs, with no masking.
    pub fn pooled_features(&self, ps: &ParamSet, video: &VideoTensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = self.embed(&mut g, &b, video)?;
        let f = self.encode(&mut g, &b, x)?;
        let t = g.value(f);
        let (n, d) = t.dims2()?;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(out)
    }
}

/// `err_i = mean over the cube of (pred − target)²` for each masked token,
/// and `L_R = Σ err_i / |I_m|`.
pub fn reconstruction_loss(
    g: &mut Graph,
    predictions: Var,
    targets: &TargetPatches,
    masked: &[usize],
    kind: ReconLossKind,
) -> Result<ReconstructionResult> {
    if masked.is_empty() {
        return Err(Error::InvalidArgument(
            "reconstruction loss needs at least one masked token".into(),
        ));
    }
    let pred_shape = g.value(predictions).shape().to_vec();
    if pred_shape != targets.targets.shape() {
        return Err(Error::InvalidArgument(format!(
            "predictions {pred_shape:?} vs targets {:?}",
            targets.targets.shape()
        )));
    }
    let pred_m = g.gather_rows(predictions, masked)?;
    let tgt_m = g.constant(tensor::gather_rows(&targets.targets, masked)?);
    let diff = g.sub(pred_m, tgt_m)?;
    let r = match kind {
        ReconLossKind::Mse => g.square(diff)?,
        ReconLossKind::L1 => g.abs(diff)?,
    };
    let per_token_err = g.mean_cols(r)?;
    let loss = g.mean(per_token_err)?;
    Ok(ReconstructionResult { per_token_err, loss })
}

/// `L = L_R + λ · L_S`.
pub fn combined_loss(g: &mut Graph, recon: Var, sampling: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("loss weight must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(sampling, lambda)?;
    Ok(g.add(recon, weighted)?)
}
