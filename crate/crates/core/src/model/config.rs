use serde::{Deserialize, Serialize};

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};

fn yes() -> bool {
    true
}

fn default_clamp() -> f64 {
    20.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Shape and mechanism of a language model. The attention flags mirror
/// [`AttentionConfig`] and are shared by every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mechanism: Mechanism,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub causal: bool,
    #[serde(default = "yes")]
    pub use_rope: bool,
    #[serde(default)]
    pub include_zero_order: bool,
    #[serde(default)]
    pub sqrt_decay: bool,
    #[serde(default = "default_clamp")]
    pub clamp_s: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "yes")]
    pub attn_norm: bool,
    #[serde(default = "yes")]
    pub block_norm: bool,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        max_seq_len: usize,
        mechanism: Mechanism,
    ) -> Self {
        let a = AttentionConfig::new(d_model, n_heads, mechanism);
        Self {
            vocab_size,
            n_layers,
            d_model,
            n_heads,
            max_seq_len,
            mechanism,
            seed: 0,
            causal: a.causal,
            use_rope: a.use_rope,
            include_zero_order: a.include_zero_order,
            sqrt_decay: a.sqrt_decay,
            clamp_s: a.clamp_s,
            norm_eps: a.norm_eps,
            attn_norm: a.attn_norm,
            block_norm: a.block_norm,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            mechanism: self.mechanism,
            causal: self.causal,
            use_rope: self.use_rope,
            include_zero_order: self.include_zero_order,
            sqrt_decay: self.sqrt_decay,
            clamp_s: self.clamp_s,
            norm_eps: self.norm_eps,
            attn_norm: self.attn_norm,
            block_norm: self.block_norm,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Whether the mechanism consumes rotary embeddings. Mechanisms that
    /// do not get learned absolute positions instead.
    pub fn rotary(&self) -> bool {
        self.use_rope && matches!(self.mechanism, Mechanism::Zeros | Mechanism::Softmax)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be >= 1".into()));
        }
        if self.n_layers == 0 && self.d_model == 0 {
            return Err(Error::Config("d_model must be >= 1".into()));
        }
        self.attention().validate()
    }
}
