use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token-mixing mechanism of an attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Linear-time zero-sum attention.
    Zeros,
    /// Quadratic zero-sum reweighting of dot-product softmax rows.
    ZerosSm,
    Softmax,
    LinattnElu,
}

impl Mechanism {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zeros" => Some(Mechanism::Zeros),
            "zeros_sm" => Some(Mechanism::ZerosSm),
            "softmax" => Some(Mechanism::Softmax),
            "linattn_elu" | "linattn" => Some(Mechanism::LinattnElu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Zeros => "zeros",
            Mechanism::ZerosSm => "zeros_sm",
            Mechanism::Softmax => "softmax",
            Mechanism::LinattnElu => "linattn_elu",
        }
    }

    /// Linear mechanisms normalize the concatenated head outputs.
    pub fn is_linear(self) -> bool {
        matches!(self, Mechanism::Zeros | Mechanism::LinattnElu)
    }
}

/// Eps added to vector norms when forming unit queries and keys.
pub const DIRECTION_EPS: f64 = 1e-6;

fn yes() -> bool {
    true
}

fn default_clamp() -> f64 {
    20.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Attention hyperparameters and mode flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub mechanism: Mechanism,
    #[serde(default = "yes")]
    pub causal: bool,
    #[serde(default = "yes")]
    pub use_rope: bool,
    #[serde(default)]
    pub include_zero_order: bool,
    #[serde(default)]
    pub sqrt_decay: bool,
    /// Logits pass through `clamp_s * tanh(s / clamp_s)`.
    #[serde(default = "default_clamp")]
    pub clamp_s: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// LayerNorm on concatenated head outputs (linear mechanisms only).
    #[serde(default = "yes")]
    pub attn_norm: bool,
    /// Pre-LN before the attention and feed-forward sublayers.
    #[serde(default = "yes")]
    pub block_norm: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, mechanism: Mechanism) -> Self {
        Self {
            d_model,
            n_heads,
            mechanism,
            causal: true,
            use_rope: true,
            include_zero_order: false,
            sqrt_decay: false,
            clamp_s: default_clamp(),
            norm_eps: default_norm_eps(),
            attn_norm: true,
            block_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.use_rope && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope needs an even head_dim, got {}",
                self.head_dim()
            )));
        }
        if !(self.clamp_s > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("clamp_s and norm_eps must be positive".into()));
        }
        Ok(())
    }
}
