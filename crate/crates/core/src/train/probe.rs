//! Linear probe: multinomial logistic regression on frozen, mean-pooled
//! encoder features of every token.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AdaMae;
use crate::synth::{make_corpus, SpriteConfig, SyntheticVideo};
use crate::tokenizer::PatchGeometry;
use crate::tensor::{self, ParamSet};

/// L2-regularized softmax regression, solved to convergence by Newton's
/// method.
///
/// `l2 = 0.1` is the weakest penalty in {1e-4, ..., 1} at which the probe on
/// a random-init encoder stays at chance on both splits; weaker penalties
/// let the probe read the class from random features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub classes: usize,
    pub l2: f64,
    /// Stop once the largest gradient entry is below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            l2: 0.1,
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

/// Held-out labelled clips for the probe. The test split uses `seed + 1`,
/// so the two splits never share a clip stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeData {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for ProbeData {
    fn default() -> Self {
        Self {
            train_count: 400,
            test_count: 200,
            seed: 2000,
        }
    }
}

impl ProbeData {
    pub fn generate(
        &self,
        sprite: &SpriteConfig,
        geom: &PatchGeometry,
    ) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
        Ok((
            make_corpus(self.train_count, sprite, geom, self.seed)?,
            make_corpus(self.test_count, sprite, geom, self.seed + 1)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn features(model: &AdaMae, params: &ParamSet, clips: &[SyntheticVideo]) -> Result<Vec<Vec<f64>>> {
    clips
        .par_iter()
        .map(|c| model.pooled_features(params, &c.video))
        .collect()
}

/// Per-feature mean and standard deviation of the training rows.
fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for row in x {
        for j in 0..d {
            std[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    (mean, std)
}

/// Standardized rows with a trailing constant 1 for the bias.
fn design(x: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let mut row: Vec<f64> = r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect();
            row.push(1.0);
            row
        })
        .collect()
}

/// Class weights, `classes × D` row-major over the augmented features.
struct Linear {
    w: Vec<f64>,
    dim: usize,
}

impl Linear {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks(self.dim)
            .map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(row, &label)| self.predict(row) == label).count();
        hits as f64 / y.len() as f64
    }

    /// Mean cross-entropy plus `l2/2 · ‖w‖²`. The bias column is penalized
    /// too; on standardized features this only pins down the softmax shift.
    fn objective(&self, x: &[Vec<f64>], y: &[usize], l2: f64) -> Result<f64> {
        let mut ce = 0.0;
        for (row, &label) in x.iter().zip(y) {
            ce -= tensor::log_softmax(&self.logits(row))?[label];
        }
        Ok(ce / x.len() as f64 + 0.5 * l2 * self.w.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Newton iterations with a backtracking line search. The objective is
/// strictly convex for `l2 > 0`, so the minimizer is unique and the
/// Hessian is positive definite.
fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, l2: f64, cfg: &ProbeConfig) -> Result<Linear> {
    let dim = x[0].len();
    let size = classes * dim;
    let n = x.len() as f64;
    let mut model = Linear { w: vec![0.0; size], dim };
    for _ in 0..cfg.max_iter {
        let mut grad = DVector::<f64>::zeros(size);
        let mut hess = DMatrix::<f64>::zeros(size, size);
        for (row, &label) in x.iter().zip(y) {
            let p = tensor::softmax(&model.logits(row))?;
            for c in 0..classes {
                let delta = (p[c] - if c == label { 1.0 } else { 0.0 }) / n;
                for j in 0..dim {
                    grad[c * dim + j] += delta * row[j];
                }
                for c2 in 0..classes {
                    let s = (if c == c2 { p[c] } else { 0.0 } - p[c] * p[c2]) / n;
                    if s == 0.0 {
                        continue;
                    }
                    for j in 0..dim {
                        let sj = s * row[j];
                        for k in 0..dim {
                            hess[(c * dim + j, c2 * dim + k)] += sj * row[k];
                        }
                    }
                }
            }
        }
        for i in 0..size {
            grad[i] += l2 * model.w[i];
            hess[(i, i)] += l2;
        }
        if grad.amax() < cfg.tol {
            return Ok(model);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Training("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        let f0 = model.objective(x, y, l2)?;
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let trial = Linear {
                w: model.w.iter().zip(step.iter()).map(|(w, s)| w - t * s).collect(),
                dim,
            };
            if trial.objective(x, y, l2)? <= f0 - 1e-4 * t * slope || t < 1e-10 {
                model = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(model)
}

/// Fits the probe on the training split and scores both splits. Depends
/// only on the data: there is no random initialization or sampling.
pub fn fit_and_score(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::InvalidArgument("probe needs non-empty, equally sized features and labels".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= cfg.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{} classes",
            cfg.classes
        )));
    }
    if !(cfg.l2 > 0.0) {
        return Err(Error::InvalidArgument(format!("probe penalty must be positive, got {}", cfg.l2)));
    }
    let (mean, std) = standardizer(train_x);
    let (xs, xt) = (design(train_x, &mean, &std), design(test_x, &mean, &std));
    let m = fit(&xs, train_y, cfg.classes, cfg.l2, cfg)?;
    Ok(ProbeReport {
        train_accuracy: m.accuracy(&xs, train_y),
        test_accuracy: m.accuracy(&xt, test_y),
    })
}

/// Freezes `params`, extracts features and fits the probe on `train`,
/// reporting accuracy on both splits.
pub fn linear_probe(
    model: &AdaMae,
    params: &ParamSet,
    train: &[SyntheticVideo],
    test: &[SyntheticVideo],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let labels = |clips: &[SyntheticVideo]| clips.iter().map(|c| c.label.label() as usize).collect::<Vec<_>>();
    let (train_y, test_y) = (labels(train), labels(test));
    let train_x = features(model, params, train)?;
    let test_x = features(model, params, test)?;
    fit_and_score(&train_x, &train_y, &test_x, &test_y, cfg)
}
