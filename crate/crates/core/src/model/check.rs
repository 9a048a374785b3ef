//! Finite-difference and detachment checks of the full model on a fixed
//! video and a fixed mask.
//!
//! The sampling loss reads detached tokens and weights `log P` by detached
//! reconstruction errors, so its value still moves when the autoencoder is
//! perturbed even though no gradient flows there. Finite differences
//! therefore hold both at their unperturbed values, which is the function
//! backward differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AdaMae, ArchConfig, Stage};
use crate::error::Result;
use crate::mask::MaskSpec;
use crate::sampler;
use crate::tensor::{grad_check_with_floor, Binding, GradCheckReport, Grads, Graph, ParamSet, Partition, Tensor, Var};
use crate::tokenizer::VideoTensor;

/// Which scalar a check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Reconstruction,
    Sampling,
    Combined,
}

/// A model, its parameters and one fixed input, all derived from a seed.
pub struct CheckInstance {
    pub model: AdaMae,
    pub params: ParamSet,
    pub video: VideoTensor,
    pub mask: MaskSpec,
    pub lambda: f64,
    /// Sampler input (position-encoded tokens) at the unperturbed parameters.
    pub frozen_tokens: Tensor,
    /// Per-masked-token errors at the unperturbed parameters.
    pub frozen_err: Tensor,
}

/// Standard deviation of the noise added to every initial parameter. At the
/// training init (std 0.02) many gradients are around 1e-9, below what
/// central differences can resolve in double precision.
pub const PARAM_JITTER: f64 = 0.25;

impl CheckInstance {
    /// Video values are uniform in `[0, 1)`; the mask is drawn from the
    /// initial sampler distribution.
    pub fn random(arch: &ArchConfig, seed: u64, rho: f64, lambda: f64) -> Result<Self> {
        let model = AdaMae::new(arch.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model.init_params(&mut rng)?;
        let jitter = Normal::new(0.0, PARAM_JITTER).expect("positive std");
        for (_, p) in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
        }
        let shape = model.geometry().video_shape();
        let n: usize = shape.iter().product();
        let video = VideoTensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())?;
        let p = model.probability_map(&params, &video)?;
        let mask = sampler::sample_visible(&p, rho, &mut rng)?;
        let mut inst = Self {
            model,
            params,
            video,
            mask,
            lambda,
            frozen_tokens: Tensor::scalar(0.0),
            frozen_err: Tensor::scalar(0.0),
        };
        let mut g = Graph::new();
        let b = inst.params.bind(&mut g);
        let x = inst.model.embed(&mut g, &b, &inst.video)?;
        inst.frozen_tokens = g.value(x).clone();
        let out = inst.forward(&mut g, &b)?;
        inst.frozen_err = g.value(out.recon.per_token_err).clone();
        Ok(inst)
    }

    fn forward(&self, g: &mut Graph, b: &Binding) -> Result<super::ForwardOutput> {
        self.model
            .forward_with_mask(g, b, &self.video, self.mask.clone(), true, self.lambda, &mut Vec::<Stage>::new())
    }

    /// The graph's own losses; used for backward.
    fn loss(&self, g: &mut Graph, b: &Binding, term: LossTerm) -> Result<Var> {
        let out = self.forward(g, b)?;
        Ok(match term {
            LossTerm::Reconstruction => out.recon.loss,
            LossTerm::Sampling => out.sampling_loss,
            LossTerm::Combined => out.loss,
        })
    }

    /// Same losses with the sampler input and the sampling-loss errors
    /// replaced by their frozen values.
    fn frozen_loss(&self, g: &mut Graph, b: &Binding, term: LossTerm) -> Result<Var> {
        let out = self.forward(g, b)?;
        let x = g.constant(self.frozen_tokens.clone());
        let scored = sampler::score_tokens(g, b, &self.model.config().sampler_config(), x)?;
        let err = g.constant(self.frozen_err.clone());
        let form = self.model.config().sampling_loss;
        let l_s = sampler::sampling_loss(g, &scored, &self.mask.masked, err, form)?;
        Ok(match term {
            LossTerm::Reconstruction => out.recon.loss,
            LossTerm::Sampling => l_s,
            LossTerm::Combined => super::combined_loss(g, out.recon.loss, l_s, self.lambda)?,
        })
    }

    /// Backward gradients of one loss term for every parameter.
    pub fn gradients(&self, term: LossTerm) -> Result<Grads> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let l = self.loss(&mut g, &b, term)?;
        let grads = g.backward(l)?;
        Ok(b.collect(&grads, &self.params))
    }

    /// Central-difference check of `term` over parameters in `partitions`.
    pub fn grad_check(&self, term: LossTerm, partitions: &[Partition], h: f64) -> Result<GradCheckReport> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let l = self.frozen_loss(&mut g, &b, term)?;
        let scale = g.value(l).item().abs().max(1.0);
        grad_check_with_floor(
            &self.params,
            h,
            GRAD_CHECK_FLOOR * scale,
            |_, p| partitions.contains(&p.partition),
            |g, b| self.frozen_loss(g, b, term),
        )
    }
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    /// `L_R` with respect to the autoencoder.
    pub recon: GradCheckReport,
    /// `L_S` with respect to the sampler.
    pub sampling: GradCheckReport,
    /// `L_R + λ·L_S` with respect to everything.
    pub combined: GradCheckReport,
}

impl ModelGradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.recon.max_rel_err.max(self.sampling.max_rel_err).max(self.combined.max_rel_err)
    }
}

pub const GRAD_CHECK_H: f64 = 1e-5;

/// Difference quotients at `h = 1e-5` carry roughly `1e-11·|L|` of
/// roundoff; structurally zero gradients, such as those of key biases, come
/// out at that size. Gradients below `floor · max(|L|, 1)` are compared
/// absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Runs all three checks on one random instance at 64-bit precision.
pub fn model_grad_check(arch: &ArchConfig, seed: u64, rho: f64, lambda: f64) -> Result<ModelGradCheck> {
    let inst = CheckInstance::random(arch, seed, rho, lambda)?;
    Ok(ModelGradCheck {
        recon: inst.grad_check(LossTerm::Reconstruction, &[Partition::Mae], GRAD_CHECK_H)?,
        sampling: inst.grad_check(LossTerm::Sampling, &[Partition::Sampler], GRAD_CHECK_H)?,
        combined: inst.grad_check(LossTerm::Combined, &[Partition::Mae, Partition::Sampler], GRAD_CHECK_H)?,
    })
}
