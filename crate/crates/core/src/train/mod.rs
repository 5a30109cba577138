//! Optimization: schedule, AdamW, clipping and the training loop.

mod optimizer;
mod run;
mod schedule;

pub use optimizer::{adamw_step, clip_grad_norm, global_norm, OptimizerState};
pub use run::{
    epoch_batches, epoch_checkpoint_name, final_checkpoint_name, init_checkpoint_name, plan, read_log, train,
    train_aug_rotate, LogRecord, StepPlan, TrainOptions, TrainOutcome, Trainer, LOG_FILE,
};
pub use schedule::cosine_warmup_lr;

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Supervised losses plus the latent equivariance loss.
    #[default]
    TransIp,
    /// Supervised losses on randomly rotated inputs and labels.
    TransAug,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::TransIp => "transip",
            Mode::TransAug => "transaug",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transip" => Ok(Mode::TransIp),
            "transaug" => Ok(Mode::TransAug),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected transip or transaug)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_fraction: f64,
    pub min_lr_factor: f64,
    pub epochs: u64,
    /// Upper bound on real atoms per batch.
    pub batch_max_tokens: usize,
    pub seed: u64,
    pub mode: Mode,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-3,
            grad_clip_norm: 200.0,
            warmup_fraction: 0.01,
            min_lr_factor: 0.01,
            epochs: 5,
            batch_max_tokens: 512,
            seed: 0,
            mode: Mode::TransIp,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Loss weights actually used: TransAug drops the latent term.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::TransIp => self.weights,
            Mode::TransAug => LossWeights { latent: 0.0, ..self.weights },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("weight_decay must be non-negative and grad_clip_norm positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.min_lr_factor) {
            return bad("warmup_fraction and min_lr_factor must lie in [0, 1]".into());
        }
        if self.epochs == 0 || self.batch_max_tokens == 0 {
            return bad("epochs and batch_max_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        self.weights.validate()
    }
}
