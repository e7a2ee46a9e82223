//! Parameter containers, generic over the leaf type so the same layout
//! holds tensors, tape variables or gradients.

use crate::config::Mechanism;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Std of token and position embeddings at initialization.
pub const EMBED_STD: f64 = 0.02;

macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            required { $($(#[$rm:meta])* $r:ident,)* }
            optional { $($(#[$om:meta])* $o:ident,)* }
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = Tensor> {
            $($(#[$rm])* pub $r: P,)*
            $($(#[$om])* pub $o: Option<P>,)*
        }

        impl<P> $name<P> {
            /// Present entries in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, &P)> {
                let mut out = vec![$((stringify!($r), &self.$r),)*];
                $(if let Some(p) = &self.$o {
                    out.push((stringify!($o), p));
                })*
                out
            }

            pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                let mut out = vec![$((stringify!($r), &mut self.$r),)*];
                $(if let Some(p) = &mut self.$o {
                    out.push((stringify!($o), p));
                })*
                out
            }

            /// Applies `f` to every present entry, keeping the layout.
            pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> $name<Q> {
                $name {
                    $($r: f(stringify!($r), &self.$r),)*
                    $($o: self.$o.as_ref().map(|p| f(stringify!($o), p)),)*
                }
            }
        }
    };
}

param_struct! {
    /// One transformer block. Optional entries exist only for the
    /// mechanisms or flags that use them.
    pub struct BlockParams {
        required {
            w_q,
            w_k,
            w_v,
            w_o,
            /// `d x 8d`: gate half then value half.
            ffn_w_in,
            ffn_b_in,
            /// `4d x d`.
            ffn_w_out,
            ffn_b_out,
        }
        optional {
            ln1_gain,
            ln1_bias,
            /// Deviation-logit projection (`zeros`).
            w_u,
            /// Gate projection: `d x 3H` for `zeros`, `d x 2H` for `zeros_sm`.
            w_g,
            /// Deviation-logit prior mean, `H x head_dim`.
            mu,
            /// Log prior strength, `H`.
            tau,
            attn_ln_gain,
            attn_ln_bias,
            ln2_gain,
            ln2_bias,
        }
    }
}

param_struct! {
    /// Everything outside the blocks.
    pub struct GlobalParams {
        required {
            /// `vocab x d`, also the output head.
            embed,
            lnf_gain,
            lnf_bias,
        }
        optional {
            /// Learned absolute positions, `max_seq_len x d`.
            pos,
        }
    }
}

/// Full model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub global: GlobalParams<P>,
    pub blocks: Vec<BlockParams<P>>,
}

impl<P> ModelParams<P> {
    /// `(name, leaf)` pairs with names like `embed` or `blocks.1.w_q`.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out: Vec<(String, &P)> = self
            .global
            .entries()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.entries().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out: Vec<(String, &mut P)> = self
            .global
            .entries_mut()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.entries_mut().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            global: self.global.map(&mut f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(|n, p| f(&format!("blocks.{i}.{n}"), p)))
                .collect(),
        }
    }
}

/// Whether decoupled weight decay applies to a parameter name. Norm gains,
/// biases and the deviation-logit prior are exempt.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.ends_with("_gain") || leaf.ends_with("_bias") || leaf.starts_with("ffn_b_") || leaf == "mu" || leaf == "tau")
}

/// Expected shape of every parameter for `cfg`.
pub fn shapes(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
    let (d, v, heads, h) = (cfg.d_model, cfg.vocab_size, cfg.n_heads, cfg.head_dim());
    let norm = |on: bool| on.then(|| vec![d]);
    let gates = match cfg.mechanism {
        Mechanism::Zeros => Some(vec![d, 3 * heads]),
        Mechanism::ZerosSm => Some(vec![d, 2 * heads]),
        _ => None,
    };
    let zeros = cfg.mechanism == Mechanism::Zeros;
    let attn_norm = cfg.attn_norm && cfg.mechanism.is_linear();
    let block = BlockParams {
        w_q: vec![d, d],
        w_k: vec![d, d],
        w_v: vec![d, d],
        w_o: vec![d, d],
        ffn_w_in: vec![d, 8 * d],
        ffn_b_in: vec![8 * d],
        ffn_w_out: vec![4 * d, d],
        ffn_b_out: vec![d],
        ln1_gain: norm(cfg.block_norm),
        ln1_bias: norm(cfg.block_norm),
        w_u: zeros.then(|| vec![d, d]),
        w_g: gates,
        mu: zeros.then(|| vec![heads, h]),
        tau: zeros.then(|| vec![heads]),
        attn_ln_gain: norm(attn_norm),
        attn_ln_bias: norm(attn_norm),
        ln2_gain: norm(cfg.block_norm),
        ln2_bias: norm(cfg.block_norm),
    };
    ModelParams {
        global: GlobalParams {
            embed: vec![v, d],
            lnf_gain: vec![d],
            lnf_bias: vec![d],
            pos: (!cfg.rotary()).then(|| vec![cfg.max_seq_len, d]),
        },
        blocks: vec![block; cfg.n_layers],
    }
}

/// Seeded initialization: Gaussian `1/sqrt(fan_in)` for matrices,
/// [`EMBED_STD`] for embeddings, ones for norm gains, zeros elsewhere.
/// Each parameter draws from its own stream of `cfg.seed`.
pub fn init(cfg: &ModelConfig) -> ModelParams {
    let mut stream = 0u64;
    shapes(cfg).map(|name, shape| {
        stream += 1;
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let mut rng = SeededRng::stream(cfg.seed, stream);
        match leaf {
            "embed" | "pos" => Tensor::randn(shape.clone(), EMBED_STD, &mut rng),
            _ if leaf.ends_with("_gain") => Tensor::full(shape.clone(), 1.0),
            _ if shape.len() == 2 && leaf != "mu" => {
                Tensor::randn(shape.clone(), 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            }
            _ => Tensor::zeros(shape.clone()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_per_mechanism() {
        let z = shapes(&ModelConfig::new(11, 2, 16, 2, 8, Mechanism::Zeros));
        assert_eq!(z.blocks[0].w_g.as_deref(), Some(&[16, 6][..]));
        assert_eq!(z.blocks[0].mu.as_deref(), Some(&[2, 8][..]));
        assert!(z.global.pos.is_none());
        let s = shapes(&ModelConfig::new(11, 1, 16, 2, 8, Mechanism::Softmax));
        assert!(s.blocks[0].w_g.is_none() && s.blocks[0].attn_ln_gain.is_none());
        let l = shapes(&ModelConfig::new(11, 1, 16, 2, 8, Mechanism::LinattnElu));
        assert_eq!(l.global.pos.as_deref(), Some(&[8, 16][..]));
    }

    #[test]
    fn names_and_decay() {
        let p = init(&ModelConfig::new(11, 2, 16, 2, 8, Mechanism::Zeros));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"blocks.1.w_u".to_string()));
        assert!(decays("blocks.0.w_q") && decays("embed"));
        assert!(!decays("blocks.0.ln1_gain") && !decays("blocks.1.tau") && !decays("blocks.0.ffn_b_in"));
        assert!(!decays("lnf_bias") && !decays("blocks.0.mu"));
    }

    #[test]
    fn deterministic_init() {
        let c = ModelConfig::new(11, 2, 16, 2, 8, Mechanism::Zeros);
        assert_eq!(init(&c), init(&c));
        let p = init(&c);
        assert!(p.blocks[0].mu.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.blocks[0].ln1_gain.as_ref().unwrap().data().iter().all(|&v| v == 1.0));
    }
}
