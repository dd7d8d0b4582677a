//! Run configuration: every hyperparameter of a pretrain / finetune /
//! evaluate run, read from TOML and validated before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    /// Peak learning rate as a multiple of `initial_lr`; unset takes the
    /// stage default (10 for pretraining, 2 for fine-tuning).
    pub warmup_target_multiplier: Option<f64>,
    /// Explicit warmup length; otherwise `warmup_fraction` of the run.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub cosine_alpha: f64,
    /// Explicit decay length; otherwise `decay_steps_factor` times the
    /// post-warmup steps.
    pub decay_steps: Option<usize>,
    pub decay_steps_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-5,
            warmup_target_multiplier: None,
            warmup_steps: None,
            warmup_fraction: 0.05,
            cosine_alpha: 0.1,
            decay_steps: None,
            decay_steps_factor: 0.95,
        }
    }
}

pub const PRETRAIN_WARMUP_MULTIPLIER: f64 = 10.0;
pub const FINETUNE_WARMUP_MULTIPLIER: f64 = 2.0;

impl ScheduleConfig {
    /// Concrete schedule for a run of `total` steps.
    pub fn build(&self, total: usize, default_multiplier: f64) -> LrSchedule {
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total as f64).round() as usize);
        let decay = self
            .decay_steps
            .unwrap_or_else(|| (self.decay_steps_factor * total.saturating_sub(warmup) as f64).round() as usize)
            .max(1);
        LrSchedule {
            initial_lr: self.initial_lr,
            warmup_target_multiplier: self.warmup_target_multiplier.unwrap_or(default_multiplier),
            warmup_steps: warmup,
            cosine_alpha: self.cosine_alpha,
            decay_steps: decay,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{section}.schedule: {m}")));
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be finite and >= 0");
        }
        if self.warmup_target_multiplier.is_some_and(|m| !(m > 0.0)) {
            return bad("warmup_target_multiplier must be > 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cosine_alpha) {
            return bad("cosine_alpha must be in [0, 1]");
        }
        if !(self.decay_steps_factor > 0.0) || self.decay_steps == Some(0) {
            return bad("decay length must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability that a feature is replaced by the partner's value.
    pub cutmix_swap_prob: f64,
    /// Weight of the anchor in the latent interpolation (1 = no mixing).
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cutmix_swap_prob: 0.2,
            mixup_alpha: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Power-iteration steps per training step.
    pub power_iters: usize,
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 256,
            power_iters: 1,
            augment: AugmentConfig::default(),
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub power_iters: usize,
    /// Validation interval in steps.
    pub eval_every: usize,
    /// Evaluations without validation-AUPRC improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    /// Share of the training rows held out for validation.
    pub val_fraction: f64,
    /// Train only the task heads.
    pub linear_probe: bool,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            batch_size: 256,
            power_iters: 1,
            eval_every: 100,
            patience: 5,
            val_fraction: 0.1,
            linear_probe: false,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub ece_bins: usize,
    /// Rows per inference chunk.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            ece_bins: 15,
            chunk: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Permutation repeats per feature.
    pub repeats: usize,
    /// Largest tolerated drop in validation AUROC before stopping.
    pub tolerance: f64,
    pub min_features: usize,
    pub val_fraction: f64,
    /// Logistic-probe training epochs.
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            tolerance: 0.002,
            min_features: 1,
            val_fraction: 0.3,
            probe_epochs: 200,
            probe_lr: 0.5,
            probe_l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub select: SelectConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = &self.pretrain;
        if p.steps > 0 && p.batch_size < 2 {
            return Err(Error::Config("pretrain.batch_size must be >= 2 (contrastive negatives)".into()));
        }
        if !(0.0..=1.0).contains(&p.augment.cutmix_swap_prob) {
            return Err(Error::Config("pretrain.augment.cutmix_swap_prob must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&p.augment.mixup_alpha) {
            return Err(Error::Config("pretrain.augment.mixup_alpha must be in [0, 1]".into()));
        }
        p.weights.validate()?;
        p.schedule.validate("pretrain")?;
        let f = &self.finetune;
        if f.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be >= 1".into()));
        }
        if f.eval_every == 0 {
            return Err(Error::Config("finetune.eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&f.val_fraction) {
            return Err(Error::Config("finetune.val_fraction must be in [0, 1)".into()));
        }
        f.schedule.validate("finetune")?;
        for opt in [&p.optimizer, &f.optimizer] {
            if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) || !(opt.eps > 0.0) || !(opt.weight_decay >= 0.0) {
                return Err(Error::Config("optimizer: need beta1, beta2 in [0,1), eps > 0, weight_decay >= 0".into()));
            }
        }
        if self.eval.folds < 2 {
            return Err(Error::Config("eval.folds must be >= 2".into()));
        }
        if self.eval.ece_bins == 0 || self.eval.chunk == 0 {
            return Err(Error::Config("eval.ece_bins and eval.chunk must be >= 1".into()));
        }
        let s = &self.select;
        if s.repeats == 0 || !(s.tolerance >= 0.0) || s.min_features == 0 || !(0.0..1.0).contains(&s.val_fraction) {
            return Err(Error::Config("select: need repeats >= 1, tolerance >= 0, min_features >= 1, val_fraction in [0,1)".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::from_toml("[finetune.schedule]\ninitial_lr = 1e-3\n[pretrain.optimizer]\nweight_decay = 0.0\n").unwrap();
        assert_eq!(c.finetune.schedule.build(100, FINETUNE_WARMUP_MULTIPLIER).peak_lr(), 2e-3);
        assert_eq!(c.pretrain.optimizer.beta2, 0.999);
    }

    #[test]
    fn invalid_heads_rejected() {
        assert!(RunConfig::from_toml("[model]\nd = 30\nheads = 8\n").is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = PretrainConfig::default().schedule.build(1000, PRETRAIN_WARMUP_MULTIPLIER);
        assert_eq!(s.lr_at(0), 5e-5);
        assert!((s.lr_at(s.warmup_steps) - 5e-4).abs() < 1e-18);
        assert!((s.lr_at(s.warmup_steps + s.decay_steps) - 5e-5).abs() < 1e-15);
        let f = FinetuneConfig::default().schedule.build(100, FINETUNE_WARMUP_MULTIPLIER);
        assert!((f.peak_lr() - 1e-4).abs() < 1e-18);
    }
}
