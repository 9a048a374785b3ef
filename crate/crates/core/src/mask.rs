//! Visible/masked token partitions and the random baseline maskers.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::PatchGeometry;

/// Partition of `0..N` into visible and masked token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// `true` = masked.
    pub mask: Vec<bool>,
    pub n_visible: usize,
}

impl MaskSpec {
    /// Builds the partition from a set of distinct visible indices.
    pub fn from_visible(n: usize, visible: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = vec![true; n];
        let mut vis: Vec<usize> = Vec::new();
        for i in visible {
            if i >= n {
                return Err(Error::InvalidArgument(format!("visible index {i} out of range {n}")));
            }
            if !mask[i] {
                return Err(Error::InvalidArgument(format!("visible index {i} repeated")));
            }
            mask[i] = false;
            vis.push(i);
        }
        vis.sort_unstable();
        let masked = (0..n).filter(|&i| mask[i]).collect();
        Ok(Self {
            n_visible: vis.len(),
            visible: vis,
            masked,
            mask,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.mask.len()
    }

    /// Checks disjointness, coverage, sortedness and the boolean mask.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.mask.len();
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        let ok = self.visible.len() == self.n_visible
            && self.n_visible >= 1
            && self.visible.len() + self.masked.len() == n
            && sorted(&self.visible)
            && sorted(&self.masked)
            && self.visible.iter().all(|&i| i < n && !self.mask[i])
            && self.masked.iter().all(|&i| i < n && self.mask[i]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("mask partition invariants violated".into()))
        }
    }
}

fn check_ratio(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("masking ratio must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

/// `floor(units · (1 − ρ))`, clamped to at least one.
///
/// A tiny slack absorbs representation error so that e.g. `10 · (1 − 0.7)`
/// counts as 3, not 2.
pub fn visible_count(units: usize, rho: f64) -> Result<usize> {
    check_ratio(rho)?;
    let raw = (units as f64 * (1.0 - rho) + 1e-9).floor() as usize;
    Ok(raw.clamp(1, units.max(1)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    #[default]
    Adaptive,
    Patch,
    Tube,
    Frame,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Adaptive => "adaptive",
            MaskStrategy::Patch => "patch",
            MaskStrategy::Tube => "tube",
            MaskStrategy::Frame => "frame",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "patch" | "random" => Ok(Self::Patch),
            "tube" => Ok(Self::Tube),
            "frame" => Ok(Self::Frame),
            other => Err(Error::InvalidArgument(format!("unknown masking strategy `{other}`"))),
        }
    }
}

/// Uniform random visible set over all spacetime tokens.
pub fn random_patch_mask<R: Rng + ?Sized>(geom: &PatchGeometry, rho: f64, rng: &mut R) -> Result<MaskSpec> {
    let n = geom.num_tokens();
    let nv = visible_count(n, rho)?;
    MaskSpec::from_visible(n, index::sample(rng, n, nv))
}

/// Random spatial visible set replicated across every temporal slice.
pub fn tube_mask<R: Rng + ?Sized>(geom: &PatchGeometry, rho: f64, rng: &mut R) -> Result<MaskSpec> {
    let cells = geom.grid_h() * geom.grid_w();
    let nv_cells = visible_count(cells, rho)?;
    let spatial = index::sample(rng, cells, nv_cells).into_vec();
    let visible = (0..geom.grid_t()).flat_map(|t| spatial.iter().map(move |&s| t * cells + s));
    MaskSpec::from_visible(geom.num_tokens(), visible)
}

/// Whole temporal slices visible or masked.
pub fn frame_mask<R: Rng + ?Sized>(geom: &PatchGeometry, rho: f64, rng: &mut R) -> Result<MaskSpec> {
    let cells = geom.grid_h() * geom.grid_w();
    let nv_slices = visible_count(geom.grid_t(), rho)?;
    let slices = index::sample(rng, geom.grid_t(), nv_slices).into_vec();
    let visible = slices.into_iter().flat_map(|t| (0..cells).map(move |s| t * cells + s));
    MaskSpec::from_visible(geom.num_tokens(), visible)
}

/// Draws a mask from one of the baseline strategies.
pub fn baseline_mask<R: Rng + ?Sized>(
    strategy: MaskStrategy,
    geom: &PatchGeometry,
    rho: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    match strategy {
        MaskStrategy::Patch => random_patch_mask(geom, rho, rng),
        MaskStrategy::Tube => tube_mask(geom, rho, rng),
        MaskStrategy::Frame => frame_mask(geom, rho, rng),
        MaskStrategy::Adaptive => Err(Error::InvalidArgument(
            "adaptive masks come from the sampling network".into(),
        )),
    }
}
