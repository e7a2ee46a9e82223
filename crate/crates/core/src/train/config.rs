use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskConfig;

/// Environment variable that replaces every seed in a training config.
pub const SEED_ENV: &str = "ZEROS_SEED";

fn default_lr() -> f64 {
    3e-4
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_batch() -> usize {
    32
}

fn default_eval_every() -> usize {
    100
}

fn default_clip() -> f64 {
    1.0
}

fn default_warmup() -> f64 {
    0.05
}

fn default_eval_batches() -> usize {
    4
}

fn default_adam_eps() -> f64 {
    1e-8
}

/// A training run, read from TOML with these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of `steps` spent on linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    /// Batches of `batch_size` sequences per evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn new(task: TaskConfig, model: ModelConfig, steps: usize) -> Self {
        Self {
            task,
            model,
            lr: default_lr(),
            betas: default_betas(),
            weight_decay: default_weight_decay(),
            steps,
            batch_size: default_batch(),
            eval_every: default_eval_every(),
            grad_clip: default_clip(),
            seed: 0,
            warmup_frac: default_warmup(),
            eval_batches: default_eval_batches(),
            adam_eps: default_adam_eps(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the run seed and the model init seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    /// Applies [`SEED_ENV`] when set. A value that does not parse is an error.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate for optimizer step `step` (0-based): linear warmup,
    /// then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * (step + 1) as f64 / w as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay >= 0, grad_clip > 0 and adam_eps > 0 required".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be >= 1".into());
        }
        self.task.validate()?;
        self.model.validate()?;
        if self.model.vocab_size < self.task.vocab_size() {
            return bad(format!(
                "model vocab_size {} is smaller than the task vocabulary {}",
                self.model.vocab_size,
                self.task.vocab_size()
            ));
        }
        if self.model.max_seq_len < self.task.seq_len() {
            return bad(format!(
                "model max_seq_len {} is shorter than the task seq_len {}",
                self.model.max_seq_len,
                self.task.seq_len()
            ));
        }
        Ok(())
    }
}
