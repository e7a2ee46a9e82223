//! Embedding, pre-LN blocks, final norm and tied output head.

use std::sync::Arc;

use super::config::ModelConfig;
use super::params::{self, BlockParams, ModelParams};
use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::tensor::{AttnSpec, Graph, Tensor, Var, ZerosVars};
use crate::zeros::rope::RopeTable;
use crate::zeros::ZerosKernel;

/// Options threaded through one forward pass.
#[derive(Clone)]
pub struct BlockContext {
    pub attention: AttentionConfig,
    pub spec: AttnSpec,
    pub rope: Option<Arc<RopeTable>>,
    pub kernel: ZerosKernel,
}

fn tag(layer: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, index } => Error::NonFinite {
            op: format!("layer {layer}: {op}"),
            index,
        },
        other => other,
    }
}

fn norm(g: &mut Graph, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
    match (gain, bias) {
        (Some(a), Some(b)) => g.layer_norm(x, a, b, eps),
        _ => Ok(x),
    }
}

fn missing(name: &str) -> Error {
    Error::Config(format!("parameter {name} is required by this mechanism"))
}

/// `x + W_o mix(LN(x))` over stacked sequences `[rows x d]`.
pub fn attention_sublayer(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &BlockContext) -> Result<Var> {
    let cfg = &ctx.attention;
    let h = norm(g, x, p.ln1_gain, p.ln1_bias, cfg.norm_eps)?;
    let q = g.matmul(h, p.w_q)?;
    let k = g.matmul(h, p.w_k)?;
    let v = g.matmul(h, p.w_v)?;
    let spec = ctx.spec;
    let mixed = match cfg.mechanism {
        Mechanism::Zeros => {
            let vars = ZerosVars {
                q,
                k,
                v,
                u: g.matmul(h, p.w_u.ok_or_else(|| missing("w_u"))?)?,
                gates: g.matmul(h, p.w_g.ok_or_else(|| missing("w_g"))?)?,
                mu: p.mu.ok_or_else(|| missing("mu"))?,
                tau: p.tau.ok_or_else(|| missing("tau"))?,
            };
            let rope = if cfg.use_rope { ctx.rope.clone() } else { None };
            g.zeros_attention(vars, spec, rope, ctx.kernel)?
        }
        Mechanism::ZerosSm => {
            let gates = g.matmul(h, p.w_g.ok_or_else(|| missing("w_g"))?)?;
            g.zeros_sm_attention(q, k, v, gates, spec)?
        }
        Mechanism::Softmax => {
            let (q, k) = match (&ctx.rope, cfg.use_rope) {
                (Some(t), true) => (g.rope(q, t.clone(), spec)?, g.rope(k, t.clone(), spec)?),
                _ => (q, k),
            };
            g.softmax_attention(q, k, v, spec)?
        }
        Mechanism::LinattnElu => g.linattn_elu(q, k, v, spec)?,
    };
    let mixed = norm(g, mixed, p.attn_ln_gain, p.attn_ln_bias, cfg.norm_eps)?;
    let out = g.matmul(mixed, p.w_o)?;
    g.add(x, out)
}

/// Gated feed-forward `(sigmoid(x W_gate) * x W_value) W_out`, biases
/// included, without the residual.
pub fn glu(g: &mut Graph, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let wide = g.value(p.ffn_b_in).numel();
    let z = g.matmul(x, p.ffn_w_in)?;
    let z = g.add_bias(z, p.ffn_b_in)?;
    let gate = g.slice_cols(z, 0, wide / 2)?;
    let value = g.slice_cols(z, wide / 2, wide)?;
    let gate = g.sigmoid(gate)?;
    let a = g.mul(gate, value)?;
    let y = g.matmul(a, p.ffn_w_out)?;
    g.add_bias(y, p.ffn_b_out)
}

/// One pre-LN block: attention sublayer then `x + GLU(LN(x))`.
pub fn block(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &BlockContext) -> Result<Var> {
    let x = attention_sublayer(g, x, p, ctx)?;
    let h = norm(g, x, p.ln2_gain, p.ln2_bias, ctx.attention.norm_eps)?;
    let y = glu(g, h, p)?;
    g.add(x, y)
}

/// A language model: configuration, parameters and cached rotary table.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Forward kernel for zero-sum attention; the naive kernel is a
    /// reference with identical outputs.
    pub kernel: ZerosKernel,
    rope: Option<Arc<RopeTable>>,
}

impl Model {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = params::init(&config);
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking every shape.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let want = params::shapes(&config);
        let have = params.map(|_, t| t.shape().to_vec());
        if want != have {
            let want_named = want.named();
            let have_named = have.named();
            let detail = want_named
                .iter()
                .find(|(n, s)| !have_named.iter().any(|(m, t)| m == n && t == s))
                .map(|(n, s)| format!("{n}: expected {s:?}"))
                .unwrap_or_else(|| "unexpected parameter".into());
            return Err(Error::Config(format!(
                "parameters do not match the model config ({detail})"
            )));
        }
        let rope = if config.rotary() {
            Some(Arc::new(RopeTable::new(config.max_seq_len, config.head_dim())?))
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            kernel: ZerosKernel::Auto,
            rope,
        })
    }

    /// Puts every parameter on `g`; trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.params.map(|_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn context(&self, seq_len: usize) -> BlockContext {
        let attention = self.config.attention();
        BlockContext {
            spec: AttnSpec::from_config(&attention, seq_len),
            attention,
            rope: self.rope.clone(),
            kernel: self.kernel,
        }
    }

    /// Logits `[rows x vocab]` for `tokens` holding whole sequences of
    /// length `seq_len` back to back.
    pub fn logits(&self, g: &mut Graph, vars: &ModelParams<Var>, tokens: &[usize], seq_len: usize) -> Result<Var> {
        let cfg = &self.config;
        if seq_len == 0 || seq_len > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        if tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::dim(format!(
                "{} tokens is not a whole number of length-{seq_len} sequences",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {bad} out of range for vocabulary {}",
                cfg.vocab_size
            )));
        }
        let mut x = g.gather_rows(vars.global.embed, tokens)?;
        if let Some(pos) = vars.global.pos {
            let ids: Vec<usize> = (0..tokens.len()).map(|r| r % seq_len).collect();
            let p = g.gather_rows(pos, &ids)?;
            x = g.add(x, p)?;
        }
        let ctx = self.context(seq_len);
        for (layer, bp) in vars.blocks.iter().enumerate() {
            x = block(g, x, bp, &ctx).map_err(|e| tag(layer, e))?;
        }
        let h = g.layer_norm(x, vars.global.lnf_gain, vars.global.lnf_bias, cfg.norm_eps)?;
        let et = g.transpose(vars.global.embed)?;
        g.matmul(h, et)
    }
}

/// Next-token logits `[N x vocab]` for one sequence.
pub fn forward_lm(tokens: &[usize], model: &Model) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let out = model.logits(&mut g, &vars, tokens, tokens.len())?;
    Ok(g.value(out).clone())
}

/// `x + Attn(LN(x))` for one sequence `x: [N x d]`, with a rotary table
/// sized to `N` when enabled.
pub fn attention_block(x: &Tensor, params: &BlockParams, cfg: &AttentionConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = x.dims2()?;
    if d != cfg.d_model {
        return Err(Error::dim(format!("input width {d} is not d_model {}", cfg.d_model)));
    }
    let rope = (cfg.use_rope && matches!(cfg.mechanism, Mechanism::Zeros | Mechanism::Softmax))
        .then(|| RopeTable::new(n, cfg.head_dim()).map(Arc::new))
        .transpose()?;
    let ctx = BlockContext {
        attention: cfg.clone(),
        spec: AttnSpec::from_config(cfg, n),
        rope,
        kernel: ZerosKernel::Auto,
    };
    let mut g = Graph::new();
    let p = params.map(|_, t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let out = attention_sublayer(&mut g, xv, &p, &ctx).map_err(|e| tag(0, e))?;
    Ok(g.value(out).clone())
}

/// The block's gated feed-forward applied to `x: [N x d]` (no residual).
pub fn glu_ffn(x: &Tensor, params: &BlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.map(|_, t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let out = glu(&mut g, xv, &p)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn cfg(m: Mechanism) -> ModelConfig {
        ModelConfig::new(11, 2, 16, 2, 8, m)
    }

    #[test]
    fn logits_shape_every_mechanism() {
        for m in [
            Mechanism::Zeros,
            Mechanism::ZerosSm,
            Mechanism::Softmax,
            Mechanism::LinattnElu,
        ] {
            let model = Model::new(cfg(m)).unwrap();
            let out = forward_lm(&[1, 2, 3, 4, 5], &model).unwrap();
            assert_eq!(out.shape(), &[5, 11]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn out_of_range_token() {
        let model = Model::new(cfg(Mechanism::Zeros)).unwrap();
        assert!(matches!(forward_lm(&[1, 11], &model), Err(Error::Input(_))));
    }

    #[test]
    fn naive_kernel_agrees() {
        let mut model = Model::new(cfg(Mechanism::Zeros)).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let a = forward_lm(&tokens, &model).unwrap();
        model.kernel = ZerosKernel::Naive;
        let b = forward_lm(&tokens, &model).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn zero_layers_is_tied_head() {
        let mut c = cfg(Mechanism::Softmax);
        c.n_layers = 0;
        let model = Model::new(c).unwrap();
        let out = forward_lm(&[2, 7], &model).unwrap();
        assert_eq!(out.shape(), &[2, 11]);
    }

    #[test]
    fn single_token_zeros_delta_is_zero() {
        let c = cfg(Mechanism::Zeros);
        let p = params::init(&c);
        let mut r = SeededRng::new(3);
        let x = Tensor::randn(vec![1, 16], 1.0, &mut r);
        let out = attention_block(&x, &p.blocks[0], &c.attention()).unwrap();
        // attention delta is exactly zero, then LN(0) = bias = 0 and W_o 0 = 0
        assert!(out.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn glu_with_zero_weights() {
        let c = cfg(Mechanism::Zeros);
        let mut p = params::init(&c).blocks[0].clone();
        for (_, t) in p.entries_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::full(vec![3, 16], 0.7);
        assert!(glu_ffn(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
