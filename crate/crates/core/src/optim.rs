//! AdamW and the warmup + cosine-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay rank-0/1 parameters (biases, norm scales).
    pub decay_vectors: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_vectors: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with decoupled weight decay: the decay term is applied to the
/// parameter directly and never enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. All gradients are checked before any parameter moves; a
    /// non-finite gradient aborts the step and names the parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Invalid(format!("negative learning rate {lr}")));
        }
        for (id, g) in grads {
            if g.len() != store.get(*id).len() {
                return Err(Error::shape("adamw_step", store.get(*id).shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (id, g) in grads {
            let n = g.len();
            let decay = if store.get(*id).ndim() >= 2 || c.decay_vectors {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g[i];
                mom.m[i] = b1 * mom.m[i] + ob1 * gi;
                mom.v[i] = b2 * mom.v[i] + ob2 * gi * gi;
                let denom = (mom.v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] - decay * p[i] - step_size * mom.m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Linear warmup from `initial_lr` to `warmup_target_multiplier * initial_lr`
/// over `warmup_steps`, then cosine decay to `cosine_alpha * peak` over
/// `decay_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub warmup_target_multiplier: f64,
    pub warmup_steps: usize,
    pub cosine_alpha: f64,
    pub decay_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 5e-5,
            warmup_target_multiplier: 10.0,
            warmup_steps: 100,
            cosine_alpha: 0.1,
            decay_steps: 1000,
        }
    }
}

impl LrSchedule {
    pub fn peak_lr(&self) -> f64 {
        self.initial_lr * self.warmup_target_multiplier
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.peak_lr();
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.initial_lr + (peak - self.initial_lr) * frac;
        }
        let t = ((step - self.warmup_steps) as f64 / self.decay_steps.max(1) as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        peak * (self.cosine_alpha + (1.0 - self.cosine_alpha) * cosine)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr >= 0.0 && self.warmup_target_multiplier > 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.cosine_alpha) {
            return Err(Error::Config(format!("cosine_alpha {} not in [0,1]", self.cosine_alpha)));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        Ok(())
    }
}
