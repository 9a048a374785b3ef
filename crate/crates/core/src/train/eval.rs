//! Held-out evaluation of a trained model under a chosen masking strategy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskStrategy;
use crate::model::{AdaMae, ForwardOptions};
use crate::sampler::ProbabilityMap;
use crate::synth::{foreground_probability_mass, SyntheticVideo};
use crate::tensor::{Graph, ParamSet};

/// Averages over the evaluated clips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskEval {
    pub strategy: MaskStrategy,
    pub loss_r: f64,
    /// Foreground mass of the per-token selection distribution. Baseline
    /// maskers select every token with the same marginal probability, so
    /// their mass is the active fraction `|m|/N`.
    pub fg_mass: f64,
    /// `fg_mass / (|m|/N)`, averaged per clip; exactly 1 for the baselines.
    pub fg_ratio: f64,
    /// Fraction of the drawn visible tokens that are active.
    pub visible_fg: f64,
}

/// Mean of `foreground mass / (|m|/N)` of the sampler distribution.
pub fn adaptivity_ratio(model: &AdaMae, params: &ParamSet, clips: &[SyntheticVideo]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("adaptivity ratio needs at least one clip".into()));
    }
    let mut sum = 0.0;
    for c in clips {
        let p = model.probability_map(params, &c.video)?;
        sum += foreground_probability_mass(&p, &c.activity)? / c.activity.fraction();
    }
    Ok(sum / clips.len() as f64)
}

/// One masked forward pass per clip, clips in order, masks drawn from a
/// generator seeded with `seed`.
pub fn evaluate_masking(
    model: &AdaMae,
    params: &ParamSet,
    clips: &[SyntheticVideo],
    strategy: MaskStrategy,
    rho: f64,
    seed: u64,
) -> Result<MaskEval> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions { strategy, rho, lambda: 0.0 };
    let mut acc = [0.0; 4];
    for c in clips {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = model.forward(&mut g, &b, &c.video, &opts, &mut rng, &mut Vec::new())?;
        let p = out.probs.unwrap_or_else(|| ProbabilityMap::uniform(*model.geometry()));
        let mass = foreground_probability_mass(&p, &c.activity)?;
        let hits = out.mask.visible.iter().filter(|&&i| c.activity.active[i]).count();
        acc[0] += g.value(out.recon.loss).item();
        acc[1] += mass;
        acc[2] += mass / c.activity.fraction();
        acc[3] += hits as f64 / out.mask.n_visible as f64;
    }
    let n = clips.len() as f64;
    Ok(MaskEval {
        strategy,
        loss_r: acc[0] / n,
        fg_mass: acc[1] / n,
        fg_ratio: acc[2] / n,
        visible_fg: acc[3] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::synth::{make_corpus, SpriteConfig};

    #[test]
    fn baselines_have_unit_ratio() {
        let arch = ArchConfig { embed_dim: 16, enc_depth: 1, dec_dim: 8, dec_depth: 1, ..ArchConfig::toy() };
        let m = AdaMae::new(arch).unwrap();
        let ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let clips = make_corpus(4, &SpriteConfig::default(), m.geometry(), 9).unwrap();
        for s in [MaskStrategy::Patch, MaskStrategy::Tube, MaskStrategy::Frame] {
            let e = evaluate_masking(&m, &ps, &clips, s, 0.75, 1).unwrap();
            assert!((e.fg_ratio - 1.0).abs() < 1e-12);
            assert!(e.loss_r > 0.0 && (0.0..=1.0).contains(&e.visible_fg));
        }
        let a = evaluate_masking(&m, &ps, &clips, MaskStrategy::Adaptive, 0.75, 1).unwrap();
        let r = adaptivity_ratio(&m, &ps, &clips).unwrap();
        assert!((a.fg_ratio - r).abs() < 1e-12);
    }
}
