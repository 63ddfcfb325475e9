use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{NumError, ParamGrads, ParamStore, Tensor};

/// Learning-rate multiplier as a function of the (1-based) optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up to the base rate, then half-cycle cosine decay to zero
    /// at `total_steps`.
    WarmupCosine { warmup_steps: u64, total_steps: u64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => {
                if warmup_steps > 0 && step <= warmup_steps {
                    return step as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily per
/// parameter, so parameters absent from `grads` are left untouched (frozen).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self, step: u64) -> f64 {
        self.config.lr * self.schedule.factor(step)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<(), NumError> {
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| NumError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumError::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumError::NonFinite(format!("gradient of {name}")));
            }
        }
        store.bump_step();
        let t = store.step();
        let c = self.config;
        let lr = self.current_lr(t);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(NumError::NonFinite(format!("parameter {name} after step {t}")));
            }
        }
        Ok(())
    }
}

/// Elementwise sum of two gradient maps (union of keys).
pub fn accumulate(into: &mut ParamGrads, other: &ParamGrads) {
    for (k, g) in other {
        match into.get_mut(k) {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                into.insert(k.clone(), g.clone());
            }
        }
    }
}

pub fn scale_grads(grads: &mut ParamGrads, c: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Global L2 norm across all gradient tensors.
pub fn grad_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .flat_map(|g: &Tensor| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        scale_grads(grads, max_norm / n);
    }
    n
}
