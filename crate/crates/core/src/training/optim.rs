//! AdamW without weight decay, linear warmup then cosine decay to zero, and
//! global-norm gradient clipping.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::{ArrayD, Zip};

use crate::error::{ForgeError, Result};
use crate::params::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1));
        Self {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate of 0-based `step`: `base·(s+1)/(W+1)` during warmup,
    /// `base` at `W`, cosine down to exactly 0 at the final step.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * (step + 1) as f64 / (w + 1) as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= w {
            return self.base_lr;
        }
        let progress = (step.min(last) - w) as f64 / (last - w) as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Factor applied to gradients whose global norm is `norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// A named parameter group that takes part in one optimizer step.
pub struct Part<'a> {
    pub name: &'a str,
    pub params: &'a mut dyn Parameters,
    pub grads: &'a dyn Parameters,
    pub trainable: &'a BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Pre-clipping gradient norm of each part.
    pub part_norms: BTreeMap<String, f64>,
    pub clip_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub step: usize,
    pub schedule: Schedule,
    pub grad_clip_norm: f64,
    /// First and second moments keyed `<part>.<param>`.
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

fn key(part: &str, name: &str) -> String {
    format!("{part}.{name}")
}

/// Optimizer with zeroed moments for every trainable parameter of `parts`.
pub fn make_optimizer_and_schedule(
    learning_rate: f64,
    warmup_ratio: f64,
    grad_clip_norm: f64,
    total_steps: usize,
    parts: &[(&str, &dyn Parameters, &BTreeSet<String>)],
) -> Result<AdamW> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(ForgeError::Config(format!("learning_rate must be positive, got {learning_rate}")));
    }
    if !(0.0..=0.5).contains(&warmup_ratio) {
        return Err(ForgeError::Config(format!("warmup_ratio {warmup_ratio} outside [0, 0.5]")));
    }
    let mut m = BTreeMap::new();
    for (part, params, trainable) in parts {
        for (name, t) in params.named_params() {
            if trainable.contains(&name) {
                m.insert(key(part, &name), ArrayD::zeros(t.shape()));
            }
        }
        if let Some(missing) = trainable.iter().find(|n| !params.param_names().contains(n)) {
            return Err(ForgeError::Config(format!("{part} has no parameter {missing}")));
        }
    }
    if m.is_empty() {
        return Err(ForgeError::Config("nothing to train: the trainable set is empty".into()));
    }
    Ok(AdamW {
        step: 0,
        schedule: Schedule::new(learning_rate, warmup_ratio, total_steps),
        grad_clip_norm,
        v: m.clone(),
        m,
    })
}

impl AdamW {
    /// Squared gradient norms of the trainable parameters, per part.
    fn norms(parts: &[Part]) -> BTreeMap<String, f64> {
        parts
            .iter()
            .map(|p| {
                let sq: f64 = p
                    .grads
                    .named_params()
                    .iter()
                    .filter(|(n, _)| p.trainable.contains(n))
                    .map(|(_, g)| g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
                    .sum();
                (p.name.to_string(), sq)
            })
            .collect()
    }

    /// One clipped AdamW update at the scheduled learning rate.
    pub fn step(&mut self, parts: &mut [Part]) -> StepStats {
        let sq = Self::norms(parts);
        let grad_norm = sq.values().sum::<f64>().sqrt();
        let scale = clip_scale(grad_norm, self.grad_clip_norm) as f32;
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let (b1, b2, eps) = (BETA1 as f32, BETA2 as f32, EPS as f32);
        for part in parts.iter_mut() {
            let grads = part.grads.named_params();
            for ((name, mut p), (_, g)) in part.params.named_params_mut().into_iter().zip(grads) {
                if !part.trainable.contains(&name) {
                    continue;
                }
                let k = key(part.name, &name);
                let m = self.m.get_mut(&k).expect("moment for every trainable parameter");
                let v = self.v.get_mut(&k).expect("moment for every trainable parameter");
                Zip::from(&mut p).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
                });
            }
        }
        StepStats {
            grad_norm,
            part_norms: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
            clip_scale: scale as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1e-3, 0.03, 1000);
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr(30), 1e-3);
        assert!(s.lr(0) < s.lr(29));
        assert!(s.lr(999) <= 1e-9 * 1e-3);
        assert!(s.lr(500) < 1e-3 && s.lr(500) > 0.0);
        let flat = Schedule::new(1e-3, 0.0, 1);
        assert_eq!(flat.lr(0), 1e-3);
    }

    #[test]
    fn clipping_is_exact() {
        assert_eq!(clip_scale(10.0, 1.0), 0.1);
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
    }
}
