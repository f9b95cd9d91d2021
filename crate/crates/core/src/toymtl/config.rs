use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Allowed warm-up epoch counts.
pub const WARMUP_EPOCH_BOUNDS: RangeInclusive<usize> = 3..=7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// When false the encoder blocks are skipped and the model reduces to
    /// mean-pooled embeddings feeding the task heads.
    pub blocks_enabled: bool,
    /// Std of task-head weights, in units of `1/sqrt(model_dim)`. Zero
    /// starts every head at zero, so early encoder gradients follow the
    /// labels rather than a random readout direction.
    pub head_init_scale: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 32,
            ff_dim: 64,
            vocab_size: 64,
            max_len: 16,
            blocks_enabled: true,
            head_init_scale: 0.0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Every violated invariant, as human-readable lines.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                out.push(format!("model.{name} must be at least 1"));
            }
        }
        if self.vocab_size < 2 {
            out.push("model.vocab_size must be at least 2 (token 0 is the separator)".into());
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            out.push(format!(
                "model.head_init_scale ({}) must be finite and non-negative",
                self.head_init_scale
            ));
        }
        if self.heads > 0 && !self.model_dim.is_multiple_of(self.heads) {
            out.push(format!(
                "model.model_dim ({}) must be divisible by model.heads ({})",
                self.model_dim, self.heads
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    /// Encoder step size during warm-up, relative to `learning_rate`. The
    /// default zero trains only the task head, so every task's importances
    /// are measured on the same encoder.
    pub warmup_encoder_lr_scale: f64,
    pub batch_size: usize,
    /// Full passes over the training data when accumulating gradients.
    pub accumulation_passes: usize,
    /// Epochs of joint training inside the multi-task evaluator.
    pub mtl_epochs: usize,
    /// Share of the primary task held out for scoring.
    pub holdout_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            learning_rate: 3e-3,
            warmup_encoder_lr_scale: 0.0,
            batch_size: 16,
            accumulation_passes: 1,
            mtl_epochs: 3,
            holdout_fraction: 0.2,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainRecipe {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !WARMUP_EPOCH_BOUNDS.contains(&self.warmup_epochs) {
            out.push(format!(
                "recipe.warmup_epochs ({}) must be in {}..={}",
                self.warmup_epochs,
                WARMUP_EPOCH_BOUNDS.start(),
                WARMUP_EPOCH_BOUNDS.end()
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            out.push(format!(
                "recipe.learning_rate ({}) must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(self.warmup_encoder_lr_scale.is_finite() && self.warmup_encoder_lr_scale >= 0.0) {
            out.push(format!(
                "recipe.warmup_encoder_lr_scale ({}) must be finite and non-negative",
                self.warmup_encoder_lr_scale
            ));
        }
        if self.batch_size == 0 {
            out.push("recipe.batch_size must be at least 1".into());
        }
        if self.accumulation_passes == 0 {
            out.push("recipe.accumulation_passes must be at least 1".into());
        }
        if self.mtl_epochs == 0 {
            out.push("recipe.mtl_epochs must be at least 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            out.push(format!(
                "recipe.holdout_fraction ({}) must be in (0, 1)",
                self.holdout_fraction
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                out.push(format!("recipe.clip_norm ({c}) must be finite and positive"));
            }
        }
        out
    }
}

/// Sub-seed for a named purpose. Distinct tags give independent streams, so
/// adding a task never shifts another task's randomness.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
