use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grads, ParamSet, Partition, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments of one parameter, with its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub slots: BTreeMap<String, Moments>,
}

/// One decoupled-weight-decay Adam update on every parameter outside
/// `frozen`. Returns an error, and changes nothing, if any gradient is not
/// finite.
///
/// `p ← p − lr·wd·p` (only where `decay` is set), then
/// `p ← p − lr · m̂ / (sqrt(v̂) + eps)`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
    frozen: &[Partition],
) -> Result<()> {
    for (name, p) in params.iter() {
        if frozen.contains(&p.partition) {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Training(format!("no gradient for `{name}`")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Training(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient for `{name}`")));
        }
    }
    for (name, p) in params.iter_mut() {
        if frozen.contains(&p.partition) {
            continue;
        }
        let g = &grads[name.as_str()];
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape().to_vec()),
            v: Tensor::zeros(p.value.shape().to_vec()),
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= decay * values[i];
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Learning-rate schedule parameters; lengths are in epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Schedule {
    /// `base_lr · batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Linear warmup from 0 to the scaled peak, then a half cosine down to 0 at
/// the end of the last epoch. Zero afterwards.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, s: &Schedule) -> f64 {
    let peak = s.peak_lr();
    let warm = s.warmup_epochs * steps_per_epoch as f64;
    let total = s.total_epochs * steps_per_epoch as f64;
    let step = step as f64;
    if step >= total {
        0.0
    } else if step < warm {
        peak * step / warm
    } else {
        let progress = (step - warm) / (total - warm);
        peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(x: f64, decay: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![x]), Partition::Mae, decay).unwrap();
        ps
    }

    fn grad(g: f64) -> Grads {
        Grads::from([("x".to_string(), Tensor::vector(vec![g]))])
    }

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut ps = scalar_set(1.5, true);
        let mut st = AdamWState::default();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        for _ in 0..5 {
            adamw_step(&mut ps, &grad(0.0), &mut st, &cfg, 0.1, &[]).unwrap();
        }
        assert_eq!(ps.get("x").unwrap().value.data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_set(0.0, false);
        let mut st = AdamWState::default();
        adamw_step(&mut ps, &grad(1.0), &mut st, &AdamWConfig::default(), 1e-3, &[]).unwrap();
        let x = ps.get("x").unwrap().value.data()[0];
        assert!((x + 1e-3).abs() < 1e-3 * 1e-7);
        assert_eq!(st.slots["x"].t, 1);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut ps = scalar_set(1.0, false);
        let mut st = AdamWState::default();
        for _ in 0..100 {
            let x = ps.get("x").unwrap().value.data()[0];
            adamw_step(&mut ps, &grad(2.0 * x), &mut st, &AdamWConfig::default(), 0.1, &[]).unwrap();
        }
        assert!(ps.get("x").unwrap().value.data()[0].abs() < 1e-2);
    }

    #[test]
    fn decay_is_skipped_where_disabled_and_for_frozen_partitions() {
        let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
        let mut with = scalar_set(2.0, true);
        let mut without = scalar_set(2.0, false);
        adamw_step(&mut with, &grad(0.0), &mut AdamWState::default(), &cfg, 0.1, &[]).unwrap();
        adamw_step(&mut without, &grad(0.0), &mut AdamWState::default(), &cfg, 0.1, &[]).unwrap();
        assert!((with.get("x").unwrap().value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(without.get("x").unwrap().value.data(), &[2.0]);

        let mut frozen = scalar_set(2.0, true);
        let mut st = AdamWState::default();
        adamw_step(&mut frozen, &grad(1.0), &mut st, &cfg, 0.1, &[Partition::Mae]).unwrap();
        assert_eq!(frozen.get("x").unwrap().value.data(), &[2.0]);
        assert!(st.slots.is_empty());
    }

    #[test]
    fn non_finite_gradient_changes_nothing() {
        let mut ps = scalar_set(1.0, true);
        let mut st = AdamWState::default();
        assert!(adamw_step(&mut ps, &grad(f64::NAN), &mut st, &AdamWConfig::default(), 0.1, &[]).is_err());
        assert_eq!(ps.get("x").unwrap().value.data(), &[1.0]);
        assert!(st.slots.is_empty());
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { base_lr: 1.5e-4, batch_size: 512, warmup_epochs: 4.0, total_epochs: 40.0 };
        let spe = 50;
        assert_eq!(lr_schedule(0, spe, &s), 0.0);
        assert_eq!(lr_schedule(200, spe, &s), 3e-4);
        assert!((lr_schedule(100, spe, &s) - 1.5e-4).abs() < 1e-18);
        assert!(lr_schedule(2000, spe, &s).abs() < 1e-12);
        assert!(lr_schedule(1999, spe, &s) > 0.0);
        let mut prev = f64::INFINITY;
        for step in 200..=2000 {
            let lr = lr_schedule(step, spe, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
