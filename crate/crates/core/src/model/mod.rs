//! Transformer language model built on the attention kernels.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod lm;
pub mod params;

pub use baselines::{linattn_elu, softmax_attention};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use lm::{attention_block, forward_lm, glu_ffn, Model};
pub use params::{BlockParams, GlobalParams, ModelParams};
