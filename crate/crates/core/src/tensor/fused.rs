//! Attention mechanisms and the language-model loss as single tape nodes.
//!
//! Inputs are stacked sequences: a `[batch * seq_len x n_heads * head_dim]`
//! matrix whose row `r` is position `r % seq_len` of sequence
//! `r / seq_len`. Each op loops over `(sequence, head)` blocks, runs the
//! single-head kernel and, on the reverse sweep, its hand-written adjoint.

use std::sync::Arc;

use super::graph::{GradSink, Graph, Node, Var};
use super::ops::Op;
use super::Tensor;
use crate::config::{AttentionConfig, Mechanism, DIRECTION_EPS};
use crate::error::{Error, Result};
use crate::model::baselines;
use crate::zeros::grad::head_backward_auto;
use crate::zeros::logits::{deviation_logits_backward, deviation_logits_into, DeviationLogitParams};
use crate::zeros::rope::RopeTable;
use crate::zeros::sm::{zeros_sm_backward, zeros_sm_forward};
use crate::zeros::{prepare_head, zeros_forward_with, HeadInputs, ZerosKernel};

/// Layout and mode flags shared by the stacked attention ops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnSpec {
    pub n_heads: usize,
    pub seq_len: usize,
    pub causal: bool,
    pub sqrt_decay: bool,
    pub include_zero_order: bool,
    pub clamp_s: f64,
}

impl AttnSpec {
    pub fn new(n_heads: usize, seq_len: usize) -> Self {
        Self {
            n_heads,
            seq_len,
            causal: true,
            sqrt_decay: false,
            include_zero_order: false,
            clamp_s: 20.0,
        }
    }

    pub fn from_config(cfg: &AttentionConfig, seq_len: usize) -> Self {
        Self {
            n_heads: cfg.n_heads,
            seq_len,
            causal: cfg.causal,
            sqrt_decay: cfg.sqrt_decay,
            include_zero_order: cfg.include_zero_order,
            clamp_s: cfg.clamp_s,
        }
    }

    fn head_config(&self, h: usize, use_rope: bool) -> AttentionConfig {
        AttentionConfig {
            causal: self.causal,
            use_rope,
            include_zero_order: self.include_zero_order,
            sqrt_decay: self.sqrt_decay,
            clamp_s: self.clamp_s,
            ..AttentionConfig::new(h, 1, Mechanism::Zeros)
        }
    }

    /// `(batch, head_dim)` for a stacked `[rows x d]` input.
    fn blocks(&self, rows: usize, d: usize) -> Result<(usize, usize)> {
        if self.n_heads == 0 || self.seq_len == 0 {
            return Err(Error::dim("attention needs n_heads >= 1 and seq_len >= 1"));
        }
        if !d.is_multiple_of(self.n_heads) {
            return Err(Error::dim(format!(
                "{d} columns not divisible into {} heads",
                self.n_heads
            )));
        }
        if !rows.is_multiple_of(self.seq_len) {
            return Err(Error::dim(format!(
                "{rows} rows is not a whole number of length-{} sequences",
                self.seq_len
            )));
        }
        Ok((rows / self.seq_len, d / self.n_heads))
    }
}

/// Tape variables feeding one zero-sum attention layer.
#[derive(Clone, Copy, Debug)]
pub struct ZerosVars {
    /// `[rows x d]` each.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub u: Var,
    /// `[rows x 3H]`, column blocks `[zero-order | first-order | higher-order]`.
    pub gates: Var,
    /// `[H x head_dim]`.
    pub mu: Var,
    /// `[H]`.
    pub tau: Var,
}

pub(crate) enum FusedOp {
    Zeros {
        vars: ZerosVars,
        spec: AttnSpec,
        rope: Option<Arc<RopeTable>>,
        kernel: ZerosKernel,
    },
    ZerosSm {
        q: Var,
        k: Var,
        v: Var,
        gates: Var,
        spec: AttnSpec,
    },
    Softmax {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
    },
    LinAttn {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

fn gather(data: &[f64], d: usize, n: usize, h: usize, b: usize, head: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * h);
    for t in 0..n {
        let r = (b * n + t) * d + head * h;
        out.extend_from_slice(&data[r..r + h]);
    }
    out
}

fn scatter_add(dst: &mut [f64], d: usize, n: usize, h: usize, b: usize, head: usize, src: &[f64]) {
    for t in 0..n {
        let r = (b * n + t) * d + head * h;
        for (x, y) in dst[r..r + h].iter_mut().zip(&src[t * h..(t + 1) * h]) {
            *x += y;
        }
    }
}

/// Columns `head, H + head, ...` of a `[rows x k*H]` gate matrix for one
/// sequence, as an `n x k` block.
fn gather_gates(data: &[f64], kinds: usize, heads: usize, n: usize, b: usize, head: usize) -> Vec<f64> {
    let w = kinds * heads;
    let mut out = Vec::with_capacity(n * kinds);
    for t in 0..n {
        for c in 0..kinds {
            out.push(data[(b * n + t) * w + c * heads + head]);
        }
    }
    out
}

fn scatter_gates(dst: &mut [f64], kinds: usize, heads: usize, n: usize, b: usize, head: usize, src: &[f64]) {
    let w = kinds * heads;
    for t in 0..n {
        for c in 0..kinds {
            dst[(b * n + t) * w + c * heads + head] += src[t * kinds + c];
        }
    }
}

/// Adjoint of `zeros::unit_rows`.
fn unit_rows_backward(x: &[f64], dy: &[f64], h: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((xr, dr), out) in x.chunks(h).zip(dy.chunks(h)).zip(dx.chunks_mut(h)) {
        let nrm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = nrm + DIRECTION_EPS;
        let proj: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let corr = if nrm > 0.0 { proj / (den * den * nrm) } else { 0.0 };
        for i in 0..h {
            out[i] = dr[i] / den - xr[i] * corr;
        }
    }
    dx
}

fn qkv_shapes(g: &Graph, q: Var, k: Var, v: Var) -> Result<(usize, usize)> {
    let dims = g.value(q).dims2()?;
    if g.value(k).shape() != g.value(q).shape() || g.value(v).shape() != g.value(q).shape() {
        return Err(Error::dim(format!(
            "attention: q {:?}, k {:?}, v {:?} must agree",
            g.value(q).shape(),
            g.value(k).shape(),
            g.value(v).shape()
        )));
    }
    Ok(dims)
}

impl FusedOp {
    pub fn name(&self) -> &'static str {
        match self {
            FusedOp::Zeros { kernel, .. } => match kernel {
                ZerosKernel::Auto | ZerosKernel::Scan => "zeros_attention",
                ZerosKernel::Dense => "zeros_attention_dense",
                ZerosKernel::Naive => "zeros_attention_naive",
                ZerosKernel::ThreeScan => "zeros_attention_three_scan",
            },
            FusedOp::ZerosSm { .. } => "zeros_sm_attention",
            FusedOp::Softmax { .. } => "softmax_attention",
            FusedOp::LinAttn { .. } => "linattn_elu",
            FusedOp::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub fn backward(&self, nodes: &[Node], _idx: usize, g: &[f64], sink: &mut GradSink<'_>) -> Result<()> {
        let val = |v: Var| &nodes[v.0].value;
        match self {
            FusedOp::Zeros { vars, spec, rope, .. } => zeros_backward(nodes, vars, spec, rope.as_deref(), g, sink),
            FusedOp::ZerosSm { q, k, v, gates, spec } => {
                let (rows, d) = val(*q).dims2()?;
                let (batch, h) = spec.blocks(rows, d)?;
                let (n, heads) = (spec.seq_len, spec.n_heads);
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dg = vec![0.0; rows * 2 * heads];
                for b in 0..batch {
                    for hd in 0..heads {
                        let gb = |x: Var| gather(val(x).data(), d, n, h, b, hd);
                        let gl = gather_gates(val(*gates).data(), 2, heads, n, b, hd);
                        let go = gather(g, d, n, h, b, hd);
                        let r = zeros_sm_backward(&gb(*q), &gb(*k), &gb(*v), &gl, n, h, spec.causal, &go)?;
                        scatter_add(&mut dq, d, n, h, b, hd, &r.q);
                        scatter_add(&mut dk, d, n, h, b, hd, &r.k);
                        scatter_add(&mut dv, d, n, h, b, hd, &r.v);
                        scatter_gates(&mut dg, 2, heads, n, b, hd, &r.gate_logits);
                    }
                }
                sink.add(*q, &dq);
                sink.add(*k, &dk);
                sink.add(*v, &dv);
                sink.add(*gates, &dg);
                Ok(())
            }
            FusedOp::Softmax { q, k, v, spec } | FusedOp::LinAttn { q, k, v, spec } => {
                let bwd = match self {
                    FusedOp::Softmax { .. } => baselines::softmax_attention_backward,
                    _ => baselines::linattn_elu_backward,
                };
                let (rows, d) = val(*q).dims2()?;
                let (batch, h) = spec.blocks(rows, d)?;
                let n = spec.seq_len;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                for b in 0..batch {
                    for hd in 0..spec.n_heads {
                        let gb = |x: Var| gather(val(x).data(), d, n, h, b, hd);
                        let go = gather(g, d, n, h, b, hd);
                        let r = bwd(&gb(*q), &gb(*k), &gb(*v), n, h, spec.causal, &go)?;
                        scatter_add(&mut dq, d, n, h, b, hd, &r.q);
                        scatter_add(&mut dk, d, n, h, b, hd, &r.k);
                        scatter_add(&mut dv, d, n, h, b, hd, &r.v);
                    }
                }
                sink.add(*q, &dq);
                sink.add(*k, &dk);
                sink.add(*v, &dv);
                Ok(())
            }
            FusedOp::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = val(*logits).dims2()?.1;
                let scale = g[0] / *count as f64;
                if let Some(gl) = sink.slot(*logits) {
                    for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = r * vocab..(r + 1) * vocab;
                        for (j, (x, p)) in gl[row.clone()].iter_mut().zip(&probs[row]).enumerate() {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            *x += scale * (p - onehot);
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

fn zeros_backward(
    nodes: &[Node],
    vars: &ZerosVars,
    spec: &AttnSpec,
    rope: Option<&RopeTable>,
    g: &[f64],
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let (rows, d) = val(vars.q).dims2()?;
    let (batch, h) = spec.blocks(rows, d)?;
    let (n, heads) = (spec.seq_len, spec.n_heads);
    let cfg = spec.head_config(h, rope.is_some());
    let (mu_all, tau_all) = (val(vars.mu).data(), val(vars.tau).data());
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut du = vec![0.0; rows * d];
    let mut dg = vec![0.0; rows * 3 * heads];
    let mut dmu = vec![0.0; heads * h];
    let mut dtau = vec![0.0; heads];
    for b in 0..batch {
        for hd in 0..heads {
            let gb = |x: Var| gather(val(x).data(), d, n, h, b, hd);
            let (q, k, v, u) = (gb(vars.q), gb(vars.k), gb(vars.v), gb(vars.u));
            let gl = gather_gates(val(vars.gates).data(), 3, heads, n, b, hd);
            let params = DeviationLogitParams {
                mu: mu_all[hd * h..(hd + 1) * h].to_vec(),
                tau: tau_all[hd],
            };
            let inputs = HeadInputs {
                n,
                q: &q,
                k: &k,
                v: &v,
                u: &u,
                gate_logits: &gl,
            };
            let prep = prepare_head(&inputs, &params, &cfg, rope)?;
            let go = gather(g, d, n, h, b, hd);
            let hg = head_backward_auto(&prep.view(&v), spec.causal, spec.sqrt_decay, &go)?;

            let (mut dqh, mut dkh) = (hg.q, hg.k);
            if let Some(table) = rope {
                for (p, (a, c)) in dqh.chunks_mut(h).zip(dkh.chunks_mut(h)).enumerate() {
                    table.rotate_vec(a, p, true);
                    table.rotate_vec(c, p, true);
                }
            }
            scatter_add(&mut dq, d, n, h, b, hd, &unit_rows_backward(&q, &dqh, h));
            scatter_add(&mut dk, d, n, h, b, hd, &unit_rows_backward(&k, &dkh, h));
            scatter_add(&mut dv, d, n, h, b, hd, &hg.v);

            let mut raw = vec![0.0; n];
            deviation_logits_into(&u, h, &params.mu, params.tau, &mut raw);
            let ds: Vec<f64> = raw
                .iter()
                .zip(&hg.s)
                .map(|(&r, &ds)| {
                    let th = (r / spec.clamp_s).tanh();
                    ds * (1.0 - th * th)
                })
                .collect();
            let mut du_h = vec![0.0; n * h];
            dtau[hd] += deviation_logits_backward(
                &u,
                h,
                &params.mu,
                params.tau,
                &ds,
                &mut du_h,
                &mut dmu[hd * h..(hd + 1) * h],
            );
            scatter_add(&mut du, d, n, h, b, hd, &du_h);

            let mut dgl = vec![0.0; n * 3];
            for t in 0..n {
                let sg = |x: f64| x * (1.0 - x);
                if spec.include_zero_order {
                    dgl[t * 3] = hg.g0[t] * sg(prep.g0[t]);
                }
                dgl[t * 3 + 1] = hg.g1[t] * sg(prep.g1[t]);
                dgl[t * 3 + 2] = hg.gh[t] * sg(prep.gh[t]);
            }
            scatter_gates(&mut dg, 3, heads, n, b, hd, &dgl);
        }
    }
    sink.add(vars.q, &dq);
    sink.add(vars.k, &dk);
    sink.add(vars.v, &dv);
    sink.add(vars.u, &du);
    sink.add(vars.gates, &dg);
    sink.add(vars.mu, &dmu);
    sink.add(vars.tau, &dtau);
    Ok(())
}

impl Graph {
    /// Multi-head zero-sum linear attention over stacked sequences.
    ///
    /// `rope` rotates unit queries and keys when present. `kernel` picks
    /// the forward evaluation; all kernels share the same adjoint.
    pub fn zeros_attention(
        &mut self,
        vars: ZerosVars,
        spec: AttnSpec,
        rope: Option<Arc<RopeTable>>,
        kernel: ZerosKernel,
    ) -> Result<Var> {
        let (rows, d) = qkv_shapes(self, vars.q, vars.k, vars.v)?;
        if self.value(vars.u).shape() != [rows, d] {
            return Err(Error::dim("zeros_attention: u must match q"));
        }
        let (batch, h) = spec.blocks(rows, d)?;
        let heads = spec.n_heads;
        if self.value(vars.gates).shape() != [rows, 3 * heads] {
            return Err(Error::dim(format!(
                "zeros_attention: gates must be [{rows} x {}], got {:?}",
                3 * heads,
                self.value(vars.gates).shape()
            )));
        }
        if self.value(vars.mu).shape() != [heads, h] || self.value(vars.tau).shape() != [heads] {
            return Err(Error::dim("zeros_attention: mu must be [H x h] and tau [H]"));
        }
        let n = spec.seq_len;
        let cfg = spec.head_config(h, rope.is_some());
        let mut out = vec![0.0; rows * d];
        {
            let val = |v: Var| self.value(v).data();
            for b in 0..batch {
                for hd in 0..heads {
                    let (q, k, v, u) = (
                        gather(val(vars.q), d, n, h, b, hd),
                        gather(val(vars.k), d, n, h, b, hd),
                        gather(val(vars.v), d, n, h, b, hd),
                        gather(val(vars.u), d, n, h, b, hd),
                    );
                    let gl = gather_gates(val(vars.gates), 3, heads, n, b, hd);
                    let params = DeviationLogitParams {
                        mu: val(vars.mu)[hd * h..(hd + 1) * h].to_vec(),
                        tau: val(vars.tau)[hd],
                    };
                    let inputs = HeadInputs {
                        n,
                        q: &q,
                        k: &k,
                        v: &v,
                        u: &u,
                        gate_logits: &gl,
                    };
                    let o = zeros_forward_with(kernel, &inputs, &params, &cfg, rope.as_deref())?;
                    scatter_add(&mut out, d, n, h, b, hd, &o);
                }
            }
        }
        let op = Op::Fused(FusedOp::Zeros {
            vars,
            spec,
            rope,
            kernel,
        });
        let ZerosVars {
            q,
            k,
            v,
            u,
            gates,
            mu,
            tau,
        } = vars;
        self.push(Tensor::new(vec![rows, d], out)?, op, &[q, k, v, u, gates, mu, tau])
    }

    /// Multi-head quadratic zero-sum softmax attention; `gates` is
    /// `[rows x 2H]` with blocks `[first-order | higher-order]`.
    pub fn zeros_sm_attention(&mut self, q: Var, k: Var, v: Var, gates: Var, spec: AttnSpec) -> Result<Var> {
        let (rows, d) = qkv_shapes(self, q, k, v)?;
        let (batch, h) = spec.blocks(rows, d)?;
        let (n, heads) = (spec.seq_len, spec.n_heads);
        if self.value(gates).shape() != [rows, 2 * heads] {
            return Err(Error::dim("zeros_sm_attention: gates must be [rows x 2H]"));
        }
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for hd in 0..heads {
                let gb = |x: Var| gather(self.value(x).data(), d, n, h, b, hd);
                let gl = gather_gates(self.value(gates).data(), 2, heads, n, b, hd);
                let o = zeros_sm_forward(&gb(q), &gb(k), &gb(v), &gl, n, h, spec.causal)?;
                scatter_add(&mut out, d, n, h, b, hd, &o);
            }
        }
        let op = Op::Fused(FusedOp::ZerosSm { q, k, v, gates, spec });
        self.push(Tensor::new(vec![rows, d], out)?, op, &[q, k, v, gates])
    }

    fn qkv_attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec, linear: bool) -> Result<Var> {
        let (rows, d) = qkv_shapes(self, q, k, v)?;
        let (batch, h) = spec.blocks(rows, d)?;
        let n = spec.seq_len;
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for hd in 0..spec.n_heads {
                let gb = |x: Var| gather(self.value(x).data(), d, n, h, b, hd);
                let o = if linear {
                    baselines::linattn_elu(&gb(q), &gb(k), &gb(v), n, h, spec.causal)?
                } else {
                    baselines::softmax_attention(&gb(q), &gb(k), &gb(v), n, h, spec.causal)?
                };
                scatter_add(&mut out, d, n, h, b, hd, &o);
            }
        }
        let op = if linear {
            FusedOp::LinAttn { q, k, v, spec }
        } else {
            FusedOp::Softmax { q, k, v, spec }
        };
        self.push(Tensor::new(vec![rows, d], out)?, Op::Fused(op), &[q, k, v])
    }

    /// Multi-head scaled dot-product softmax attention.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        self.qkv_attention(q, k, v, spec, false)
    }

    /// Multi-head 1+ELU linear attention.
    pub fn linattn_elu(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        self.qkv_attention(q, k, v, spec, true)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {rows} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: mask selects no positions".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::Input(format!(
                    "label {} out of range for vocabulary {vocab}",
                    targets[r]
                )));
            }
            let row = &x[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let op = FusedOp::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(total / count as f64), Op::Fused(op), &[logits])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::finite_diff_check;

    #[test]
    fn stacked_zeros_matches_naive_kernel() {
        let mut r = SeededRng::new(5);
        let spec = AttnSpec::new(2, 6);
        let table = Arc::new(RopeTable::new(6, 4).unwrap());
        let mut g = Graph::new();
        let mut t = |shape: Vec<usize>, std: f64| g.constant(Tensor::randn(shape, std, &mut r));
        let vars = ZerosVars {
            q: t(vec![12, 8], 1.0),
            k: t(vec![12, 8], 1.0),
            v: t(vec![12, 8], 1.0),
            u: t(vec![12, 8], 1.0),
            gates: t(vec![12, 6], 1.0),
            mu: t(vec![2, 4], 0.3),
            tau: t(vec![2], 0.3),
        };
        let a = g
            .zeros_attention(vars, spec, Some(table.clone()), ZerosKernel::Scan)
            .unwrap();
        let b = g.zeros_attention(vars, spec, Some(table), ZerosKernel::Naive).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-10);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![3, 7]));
        let l = g.cross_entropy(x, &[0, 3, 6], &[true, false, true]).unwrap();
        assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-14);
        assert!(g.cross_entropy(x, &[0, 0, 0], &[false; 3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut r = SeededRng::new(8);
        let x0 = Tensor::randn(vec![4, 5], 2.0, &mut r);
        let report = finite_diff_check(
            &[x0],
            |g, v| g.cross_entropy(v[0], &[1, 4, 0, 2], &[true, true, false, true]),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    fn attn_grad_check(mech: &str) {
        let mut r = SeededRng::new(13);
        let spec = AttnSpec::new(2, 4);
        let shapes: Vec<Vec<usize>> = vec![vec![8, 8]; 3];
        let inputs: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
        let extra = Tensor::randn(vec![8, 4], 1.0, &mut r);
        let w = Tensor::randn(vec![8, 8], 1.0, &mut r);
        let mut all = inputs;
        if mech == "zeros_sm" {
            all.push(extra);
        }
        let report = finite_diff_check(
            &all,
            |g, v| {
                let o = match mech {
                    "softmax" => g.softmax_attention(v[0], v[1], v[2], spec)?,
                    "linattn" => g.linattn_elu(v[0], v[1], v[2], spec)?,
                    _ => g.zeros_sm_attention(v[0], v[1], v[2], v[3], spec)?,
                };
                let wv = g.constant(w.clone());
                let p = g.mul(o, wv)?;
                g.sum_all(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{mech}: {report:?}");
    }

    #[test]
    fn baseline_and_sm_gradients() {
        for m in ["softmax", "linattn", "zeros_sm"] {
            attn_grad_check(m);
        }
    }

    #[test]
    fn zeros_attention_gradient() {
        let mut r = SeededRng::new(21);
        let spec = AttnSpec {
            include_zero_order: true,
            clamp_s: 5.0,
            ..AttnSpec::new(2, 5)
        };
        let table = Arc::new(RopeTable::new(5, 4).unwrap());
        let inputs = vec![
            Tensor::randn(vec![10, 8], 1.0, &mut r),
            Tensor::randn(vec![10, 8], 1.0, &mut r),
            Tensor::randn(vec![10, 8], 1.0, &mut r),
            Tensor::randn(vec![10, 8], 1.0, &mut r),
            Tensor::randn(vec![10, 6], 1.0, &mut r),
            Tensor::randn(vec![2, 4], 0.5, &mut r),
            Tensor::randn(vec![2], 0.5, &mut r),
        ];
        let w = Tensor::randn(vec![10, 8], 1.0, &mut r);
        for causal in [true, false] {
            let spec = AttnSpec { causal, ..spec };
            let report = finite_diff_check(
                &inputs,
                |g, v| {
                    let vars = ZerosVars {
                        q: v[0],
                        k: v[1],
                        v: v[2],
                        u: v[3],
                        gates: v[4],
                        mu: v[5],
                        tau: v[6],
                    };
                    let o = g.zeros_attention(vars, spec, Some(table.clone()), ZerosKernel::Scan)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(o, wv)?;
                    g.sum_all(p)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "causal={causal}: {report:?}");
        }
    }
}
