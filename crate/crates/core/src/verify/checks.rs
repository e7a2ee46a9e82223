//! Individual measurements. Each returns the quantity a check compares with
//! its tolerance, so callers can apply their own limits.

use std::sync::Arc;

use crate::config::{AttentionConfig, Mechanism};
use crate::error::Result;
use crate::model::{attention_block, softmax_attention, Model, ModelConfig};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tasks::{MemorizeConfig, MqarConfig, SelectiveCopyConfig, TaskConfig};
use crate::tensor::{finite_diff_check, AttnSpec, Graph, ReduceKind, Tensor, Var, ZerosVars};
use crate::zeros::{
    convex_deviation_feasible, soft_clamp, softmax, zero_sum_offsets, zero_sum_weights, zero_sum_weights_with,
    zeros_forward_with, zeros_sm_weights, DeviationLogitParams, Gates, HeadInputs, Residual, RopeTable, ZeroSWeightRow,
    ZerosKernel,
};

/// Sequence lengths of the scan equivalence grid.
pub const GRID_LENGTHS: [usize; 7] = [1, 2, 3, 5, 8, 64, 256];
pub const GRID_WIDTHS: [usize; 2] = [16, 64];
pub const GRID_HEADS: [usize; 2] = [1, 4];

fn max_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs().f64()).fold(0.0, f64::max)
}

/// Reference softmax in double precision, independent of the kernels.
fn softmax_f64(s: &[f64]) -> Vec<f64> {
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    s.iter().map(|v| (v - lse).exp()).collect()
}

/// Composite of matmul, layer norm, tanh, row softmax, cumsum, exp and
/// sigmoid; the worst tape/central-difference relative error.
pub fn tape_gradient_error(seed: u64) -> Result<f64> {
    let mut r = SeededRng::new(seed);
    let inputs = vec![
        Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut r),
        Tensor::uniform(vec![5, 3], -1.0, 1.0, &mut r),
        Tensor::uniform(vec![3], -1.0, 1.0, &mut r),
        Tensor::uniform(vec![3], -1.0, 1.0, &mut r),
    ];
    let w = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut r);
    let report = finite_diff_check(&inputs, |g, v| composite(g, v, &w), 1e-5)?;
    Ok(report.max_rel_err)
}

fn composite(g: &mut Graph, v: &[Var], w: &Tensor) -> Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
    let h = g.tanh(h)?;
    let s = g.softmax_rows(h, None)?;
    let c = g.cumsum(s, 1)?;
    let e = g.scale(c, 0.5)?;
    let e = g.exp(e)?;
    let e = g.sigmoid(e)?;
    let wv = g.constant(w.clone());
    let p = g.mul(e, wv)?;
    g.sum_all(p)
}

/// Whether two evaluations of the composite give bit-identical values and
/// gradients.
pub fn tape_is_deterministic(seed: u64) -> Result<bool> {
    let run = || -> Result<Vec<f64>> {
        let mut r = SeededRng::new(seed);
        let xs: Vec<Tensor> = [vec![4, 5], vec![5, 3], vec![3], vec![3]]
            .into_iter()
            .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut r))
            .collect();
        let w = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.into_iter().map(|x| g.param(x)).collect();
        let out = composite(&mut g, &vars, &w)?;
        g.backward(out)?;
        let mut bits = vec![g.value(out).item()?];
        for v in vars {
            bits.extend_from_slice(g.grad(v).expect("leaf has a gradient").data());
        }
        Ok(bits)
    };
    let (a, b) = (run()?, run()?);
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}

/// Max `|sum(softmax(s)) - 1|` over random rows of varied length and scale.
pub fn softmax_row_sum_error<T: Real>(seed: u64, rows: usize) -> f64 {
    let mut r = SeededRng::new(seed);
    (0..rows)
        .map(|_| {
            let t = 1 + r.below(256);
            let scale = r.uniform(0.1, 50.0);
            let s: Vec<T> = r.uniform_vec(t, -scale, scale);
            (softmax(&s).into_iter().sum::<T>() - T::one()).abs().f64()
        })
        .fold(0.0, f64::max)
}

/// Relative gap between the last cumulative sum and the full sum.
pub fn cumsum_total_error(seed: u64) -> Result<f64> {
    let mut r = SeededRng::new(seed);
    let (rows, cols) = (8, 200);
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(vec![rows, cols], -1.0, 1.0, &mut r));
    let c = g.cumsum(x, 1)?;
    let s = g.reduce(x, 1, ReduceKind::Sum)?;
    let (c, s) = (g.value(c), g.value(s));
    Ok((0..rows)
        .map(|i| {
            let (last, total) = (c.data()[i * cols + cols - 1], s.data()[i]);
            (last - total).abs() / total.abs().max(1.0)
        })
        .fold(0.0, f64::max))
}

/// Max elementwise violation of `softmax = 1/t + delta/t + eps`, and of the
/// fully gated weights (all three gates at 1) against an independent
/// softmax.
pub fn residual_identity_error<T: Real>(seed: u64, rows: usize, max_t: usize) -> Result<f64> {
    let mut r = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for row in 0..rows {
        let t = if row == 0 { max_t } else { 1 + r.below(max_t) };
        let scale = r.uniform(0.1, 20.0);
        let s: Vec<T> = r.uniform_vec(t, -scale, scale);
        let w = ZeroSWeightRow::compute(&s, Gates::zero_sum(T::one(), T::one()), false)?;
        let tf = T::from_usize_(t);
        for i in 0..t {
            let parts = T::one() / tf + w.delta[i] / tf + w.eps[i];
            worst = worst.max((w.softmax[i] - parts).abs().f64());
        }
        let full = zero_sum_weights(&s, Gates::new(T::one(), T::one(), T::one()), true)?;
        let reference = softmax_f64(&s.iter().map(|v| v.f64()).collect::<Vec<_>>());
        for (a, b) in full.iter().zip(&reference) {
            worst = worst.max((a.f64() - b).abs());
        }
    }
    Ok(worst)
}

/// Max of `|sum_i w_i| / t` over random rows with random gates and the
/// zero-order gate off.
pub fn zero_sum_error<T: Real>(seed: u64, rows: usize, max_t: usize, residual: Residual) -> Result<f64> {
    let mut r = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for row in 0..rows {
        let t = if row == 0 { max_t } else { 1 + r.below(max_t) };
        let scale = r.uniform(0.1, 20.0);
        let s: Vec<T> = r.uniform_vec(t, -scale, scale);
        let gates = Gates::zero_sum(T::c(r.uniform(0.0, 1.0)), T::c(r.uniform(0.0, 1.0)));
        let w = zero_sum_weights_with(&s, gates, false, residual)?;
        let sum = w.iter().copied().sum::<T>().abs().f64();
        worst = worst.max(sum / t as f64);
    }
    Ok(worst)
}

/// Random single-head inputs of width `h` over `n` steps.
struct HeadCase<T> {
    n: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    u: Vec<T>,
    gates: Vec<T>,
    params: DeviationLogitParams<T>,
}

impl<T: Real> HeadCase<T> {
    fn random(r: &mut SeededRng, n: usize, h: usize) -> Self {
        Self {
            n,
            q: r.normal_vec(n * h, 1.0),
            k: r.normal_vec(n * h, 1.0),
            v: r.normal_vec(n * h, 1.0),
            u: r.normal_vec(n * h, 1.0),
            gates: r.normal_vec(n * 3, 1.5),
            params: DeviationLogitParams {
                mu: r.normal_vec(h, 0.5),
                tau: T::c(r.uniform(-1.0, 1.0)),
            },
        }
    }

    fn inputs(&self) -> HeadInputs<'_, T> {
        HeadInputs {
            n: self.n,
            q: &self.q,
            k: &self.k,
            v: &self.v,
            u: &self.u,
            gate_logits: &self.gates,
        }
    }
}

/// Max difference between two kernels over lengths x widths x head counts
/// x `seeds`. Every head of a layer is an independent case; odd seeds add
/// the rotary rotation.
pub fn kernel_max_diff<T: Real>(a: ZerosKernel, b: ZerosKernel, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for &n in &GRID_LENGTHS {
        for &d in &GRID_WIDTHS {
            for &heads in &GRID_HEADS {
                let h = d / heads;
                let table = RopeTable::new(n, h)?;
                for seed in 0..seeds {
                    let mut r = SeededRng::stream(seed, (n * 1000 + d * 10 + heads) as u64);
                    let cfg = AttentionConfig {
                        use_rope: seed % 2 == 1,
                        ..AttentionConfig::new(h, 1, Mechanism::Zeros)
                    };
                    let rope = cfg.use_rope.then_some(&table);
                    for _ in 0..heads {
                        let c = HeadCase::<T>::random(&mut r, n, h);
                        let x = zeros_forward_with(a, &c.inputs(), &c.params, &cfg, rope)?;
                        let y = zeros_forward_with(b, &c.inputs(), &c.params, &cfg, rope)?;
                        worst = worst.max(max_diff(&x, &y));
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Growth of zero-sum weights and outputs with prefix length at a fixed
/// logit clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub clamp: f64,
    /// `e^{2S} + 2S + 2`.
    pub bound: f64,
    /// `(t, t * max_i |w_i|)`, worst over extremal and random logits.
    pub scaled_weight: Vec<(usize, f64)>,
    /// `(t, |o_t|)` for unit-norm values under extremal logits.
    pub output_norm: Vec<(usize, f64)>,
}

impl StabilityReport {
    /// Largest `t * max |w|` relative to the bound.
    pub fn weight_ratio(&self) -> f64 {
        self.scaled_weight
            .iter()
            .map(|&(_, v)| v / self.bound)
            .fold(0.0, f64::max)
    }

    /// Largest `|o_t|` relative to the bound with `B = 1`.
    pub fn output_bound_ratio(&self) -> f64 {
        self.output_norm
            .iter()
            .map(|&(_, v)| v / self.bound)
            .fold(0.0, f64::max)
    }

    /// Largest factor between `|o_t|` and `|o_{t0}|` at the first length,
    /// in either direction.
    pub fn output_drift(&self) -> f64 {
        let base = self.output_norm.first().map_or(1.0, |&(_, v)| v);
        self.output_norm
            .iter()
            .map(|&(_, v)| (v / base).max(base / v))
            .fold(1.0, f64::max)
    }
}

/// Weights for the last query of a length-`t` prefix with both gates open.
/// Extremal logits put one step at `+S` and the rest at `-S`, the pattern
/// that maximizes a single weight; random logits are soft-clamped draws.
pub fn stability<T: Real>(seed: u64, clamp: f64, lengths: &[usize]) -> Result<StabilityReport> {
    const DIM: usize = 16;
    let mut r = SeededRng::new(seed);
    let s_lim = T::c(clamp);
    let gates = Gates::zero_sum(T::one(), T::one());
    let mut report = StabilityReport {
        clamp,
        bound: (2.0 * clamp).exp() + 2.0 * clamp + 2.0,
        scaled_weight: Vec::new(),
        output_norm: Vec::new(),
    };
    for &t in lengths {
        let extremal: Vec<T> = (0..t)
            .map(|i| soft_clamp(T::c(if i == 0 { 1e3 } else { -1e3 }), s_lim))
            .collect();
        let random: Vec<T> = (0..t)
            .map(|_| soft_clamp(T::c(r.uniform(-3.0 * clamp, 3.0 * clamp)), s_lim))
            .collect();
        let we = zero_sum_weights(&extremal, gates, false)?;
        let wr = zero_sum_weights(&random, gates, false)?;
        let peak = we.iter().chain(&wr).map(|w| w.abs().f64()).fold(0.0, f64::max);
        report.scaled_weight.push((t, t as f64 * peak));
        let mut o = [0.0; DIM];
        for w in &we {
            let v: Vec<f64> = r.normal_vec(DIM, 1.0);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (oj, vj) in o.iter_mut().zip(&v) {
                *oj += w.f64() * vj / nv;
            }
        }
        report
            .output_norm
            .push((t, o.iter().map(|x| x * x).sum::<f64>().sqrt()));
    }
    Ok(report)
}

/// Output sensitivity of the last step under the `1/sqrt(t)` scaling:
/// `|o_t(x + e) - o_t(x)| / eps` for a perturbation `e` of norm `eps` on
/// every input row of every projection, averaged over `trials`.
pub fn decay_sensitivity(seed: u64, lengths: &[usize], trials: usize) -> Result<Vec<f64>> {
    const H: usize = 8;
    const EPS: f64 = 1e-6;
    let cfg = AttentionConfig {
        sqrt_decay: true,
        ..AttentionConfig::new(H, 1, Mechanism::Zeros)
    };
    let mut out = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let mut r = SeededRng::stream(seed, t as u64);
        let mut acc = 0.0;
        for _ in 0..trials {
            let base = HeadCase::<f64>::random(&mut r, t, H);
            let mut moved = HeadCase {
                params: base.params.clone(),
                gates: base.gates.clone(),
                q: base.q.clone(),
                k: base.k.clone(),
                v: base.v.clone(),
                u: base.u.clone(),
                n: t,
            };
            for x in [&mut moved.q, &mut moved.k, &mut moved.v, &mut moved.u] {
                for row in x.chunks_mut(H) {
                    let d: Vec<f64> = r.normal_vec(H, 1.0);
                    let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for (xi, di) in row.iter_mut().zip(&d) {
                        *xi += EPS * di / nd;
                    }
                }
            }
            let a = zeros_forward_with(ZerosKernel::Scan, &base.inputs(), &base.params, &cfg, None)?;
            let b = zeros_forward_with(ZerosKernel::Scan, &moved.inputs(), &moved.params, &cfg, None)?;
            let last = (t - 1) * H..t * H;
            let diff: f64 = a[last.clone()].iter().zip(&b[last]).map(|(x, y)| (x - y).powi(2)).sum();
            acc += diff.sqrt() / EPS;
        }
        out.push(acc / trials as f64);
    }
    Ok(out)
}

/// Counts of wrong span decisions: `(1, -1, 0, ...)` accepted for some
/// `t` in `2..=max_t`, and softmax-minus-uniform rows rejected.
pub fn span_violations(seed: u64, max_t: usize, rows: usize) -> Result<(usize, usize)> {
    let wrongly_accepted = (2..=max_t)
        .filter(|&t| {
            let mut w = vec![0.0; t];
            w[0] = 1.0;
            w[1] = -1.0;
            convex_deviation_feasible(&w)
        })
        .count();
    let mut r = SeededRng::new(seed);
    let mut wrongly_rejected = 0;
    for _ in 0..rows {
        let t = 1 + r.below(max_t);
        let s: Vec<f64> = r.uniform_vec(t, -10.0, 10.0);
        let w = zero_sum_weights(&s, Gates::zero_sum(1.0, 1.0), false)?;
        if !convex_deviation_feasible(&w) {
            wrongly_rejected += 1;
        }
    }
    Ok((wrongly_accepted, wrongly_rejected))
}

/// Worst reconstruction error of affine-hull targets from four values in
/// `R^3` as the mean plus a zero-sum combination, checked independently of
/// the solver's own residual. Also covers `|sum w|`.
pub fn affine_hull_error(seed: u64, instances: usize) -> Result<f64> {
    const N: usize = 4;
    const DIM: usize = 3;
    let mut r = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let values: Vec<f64> = r.normal_vec(N * DIM, 1.0);
        let mut a: Vec<f64> = r.normal_vec(N, 1.0);
        let excess = a.iter().sum::<f64>() - 1.0;
        a.iter_mut().for_each(|x| *x -= excess / N as f64);
        let target: Vec<f64> = (0..DIM)
            .map(|c| (0..N).map(|j| a[j] * values[j * DIM + c]).sum())
            .collect();
        let (w, _) = zero_sum_offsets(&values, DIM, &target)?;
        for c in 0..DIM {
            let mean = (0..N).map(|j| values[j * DIM + c]).sum::<f64>() / N as f64;
            let rebuilt = mean + (0..N).map(|j| w[j] * values[j * DIM + c]).sum::<f64>();
            worst = worst.max((rebuilt - target[c]).abs());
        }
        worst = worst.max(w.iter().sum::<f64>().abs());
    }
    Ok(worst)
}

/// Max change of the rotated dot product under a common position shift.
pub fn rope_shift_error<T: Real>(seed: u64, draws: usize) -> Result<f64> {
    const H: usize = 16;
    const LEN: usize = 512;
    let table = RopeTable::new(LEN, H)?;
    let mut r = SeededRng::new(seed);
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| *x * *y).sum::<T>();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let (q, k): (Vec<T>, Vec<T>) = (r.normal_vec(H, 1.0), r.normal_vec(H, 1.0));
        let (t, i) = (r.below(LEN / 2), r.below(LEN / 2));
        let shift = r.below(LEN / 2);
        let rotated = |x: &[T], p: usize| {
            let mut y = x.to_vec();
            table.rotate_vec(&mut y, p, false);
            y
        };
        let a = dot(&rotated(&q, t), &rotated(&k, i));
        let b = dot(&rotated(&q, t + shift), &rotated(&k, i + shift));
        worst = worst.max((a - b).abs().f64());
    }
    Ok(worst)
}

/// Tape gradient of zero-sum attention against central differences, on a
/// short sequence (dense adjoint) and a long one (scan adjoint), causal and
/// not.
pub fn zeros_gradient_error(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (seq_len, head_dim) in [(5, 4), (24, 2)] {
        let heads = 2;
        let d = heads * head_dim;
        let rows = 2 * seq_len;
        let mut r = SeededRng::stream(seed, seq_len as u64);
        let inputs = vec![
            Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![rows, 3 * heads], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![heads, head_dim], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![heads], -1.0, 1.0, &mut r),
        ];
        let w = Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut r);
        let table = Arc::new(RopeTable::new(seq_len, head_dim)?);
        for causal in [true, false] {
            let spec = AttnSpec {
                causal,
                include_zero_order: true,
                clamp_s: 5.0,
                ..AttnSpec::new(heads, seq_len)
            };
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
                    let o = g.zeros_attention(vars, spec, Some(table.clone()), ZerosKernel::Auto)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(o, wv)?;
                    g.sum_all(p)
                },
                1e-5,
            )?;
            worst = worst.max(report.max_rel_err);
        }
    }
    Ok(worst)
}

/// Zero-sum softmax reweighting measurements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZerosSmReport {
    /// Max gap to `softmax - 1/t` with saturated gates.
    pub saturated: f64,
    /// Max `|row sum|` with random gates.
    pub row_sum: f64,
    /// Max `|w|` on the first causal row.
    pub first_row: f64,
}

pub fn zeros_sm_report<T: Real>(seed: u64, trials: usize) -> Result<ZerosSmReport> {
    const N: usize = 16;
    const H: usize = 8;
    let mut r = SeededRng::new(seed);
    let mut rep = ZerosSmReport {
        saturated: 0.0,
        row_sum: 0.0,
        first_row: 0.0,
    };
    for _ in 0..trials {
        let (q, k): (Vec<T>, Vec<T>) = (r.normal_vec(N * H, 1.0), r.normal_vec(N * H, 1.0));
        let open = vec![T::c(1e4); 2 * N];
        let w = zeros_sm_weights(&q, &k, &open, N, H, true)?;
        for t in 0..N {
            let len = t + 1;
            let logits: Vec<f64> = (0..len)
                .map(|i| (0..H).map(|j| q[t * H + j].f64() * k[i * H + j].f64()).sum::<f64>() / (H as f64).sqrt())
                .collect();
            let p = softmax_f64(&logits);
            for i in 0..len {
                let want = p[i] - 1.0 / len as f64;
                rep.saturated = rep.saturated.max((w[t * N + i].f64() - want).abs());
            }
        }
        let gates: Vec<T> = r.normal_vec(2 * N, 3.0);
        let w = zeros_sm_weights(&q, &k, &gates, N, H, true)?;
        for t in 0..N {
            let sum = w[t * N..t * N + t + 1].iter().copied().sum::<T>();
            rep.row_sum = rep.row_sum.max(sum.abs().f64());
        }
        rep.first_row = rep.first_row.max(w[0].abs().f64());
    }
    Ok(rep)
}

/// Weights recovered from attention outputs by feeding the identity as
/// values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveredWeights {
    /// Max `|row sum|` of zero-sum weights (zero-order term off).
    pub zeros_row_sum: f64,
    /// Smallest softmax weight.
    pub softmax_min: f64,
    /// Max `|row sum - 1|` of softmax weights.
    pub softmax_row_sum: f64,
}

/// With identical query and key directions every angular factor is 1, so
/// the naive zero-sum path returns its radial weights directly.
pub fn recovered_weights(seed: u64) -> Result<RecoveredWeights> {
    const N: usize = 8;
    let mut r = SeededRng::new(seed);
    let mut eye = vec![0.0; N * N];
    (0..N).for_each(|i| eye[i * N + i] = 1.0);
    let dir: Vec<f64> = r.normal_vec(N, 1.0);
    let same: Vec<f64> = (0..N).flat_map(|_| dir.iter().copied()).collect();
    let u: Vec<f64> = r.normal_vec(N * N, 1.0);
    let gates: Vec<f64> = r.normal_vec(N * 3, 1.5);
    let params = DeviationLogitParams {
        mu: r.normal_vec(N, 0.5),
        tau: r.uniform(-1.0, 1.0),
    };
    let x = HeadInputs {
        n: N,
        q: &same,
        k: &same,
        v: &eye,
        u: &u,
        gate_logits: &gates,
    };
    let cfg = AttentionConfig {
        use_rope: false,
        ..AttentionConfig::new(N, 1, Mechanism::Zeros)
    };
    let w = zeros_forward_with(ZerosKernel::Naive, &x, &params, &cfg, None)?;
    let zeros_row_sum = w.chunks(N).map(|row| row.iter().sum::<f64>().abs()).fold(0.0, f64::max);
    let (q, k): (Vec<f64>, Vec<f64>) = (r.normal_vec(N * N, 1.0), r.normal_vec(N * N, 1.0));
    let p = softmax_attention(&q, &k, &eye, N, N, true)?;
    Ok(RecoveredWeights {
        zeros_row_sum,
        softmax_min: p.iter().copied().fold(f64::INFINITY, f64::min),
        softmax_row_sum: p
            .chunks(N)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max),
    })
}

/// Whether one attention block keeps the input shape under every
/// mechanism.
pub fn mechanisms_share_shapes(seed: u64) -> Result<bool> {
    let (n, d) = (6, 16);
    let mut r = SeededRng::new(seed);
    let x = Tensor::randn(vec![n, d], 1.0, &mut r);
    for m in [
        Mechanism::Zeros,
        Mechanism::ZerosSm,
        Mechanism::Softmax,
        Mechanism::LinattnElu,
    ] {
        let mc = ModelConfig::new(11, 1, d, 2, n, m);
        let model = Model::new(mc)?;
        let out = attention_block(&x, &model.params.blocks[0], &model.config.attention())?;
        if out.shape() != x.shape() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Full-model gradient check: two zero-sum layers, width 16, eight
/// positions, vocabulary 11. Parameters are jittered away from their init
/// so no gradient is trivially small. Returns the worst relative error and
/// the parameter it occurred in.
pub fn model_gradient_error(seed: u64) -> Result<(f64, String)> {
    const SEQ: usize = 8;
    let mut cfg = ModelConfig::new(11, 2, 16, 2, SEQ, Mechanism::Zeros);
    cfg.seed = seed;
    let mut r = SeededRng::stream(seed, 1);
    let base = Model::new(cfg.clone())?;
    let params = base.params.map(|_, t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x += 0.3 * r.normal());
        t
    });
    let model = Model::from_params(cfg, params)?;
    let tokens: Vec<usize> = (0..SEQ).map(|_| r.below(11)).collect();
    let labels: Vec<usize> = (0..SEQ).map(|_| r.below(11)).collect();
    let mask = vec![true; SEQ];
    let named = model.params.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let report = finite_diff_check(
        &inputs,
        |g, v| {
            let mut it = v.iter().copied();
            let vars = model.params.map(|_, _| it.next().expect("one var per parameter"));
            let logits = model.logits(g, &vars, &tokens, SEQ)?;
            g.cross_entropy(logits, &labels, &mask)
        },
        1e-5,
    )?;
    let worst = names.get(report.worst.0).cloned().unwrap_or_default();
    Ok((report.max_rel_err, worst))
}

fn task_suite(seed: u64) -> Vec<TaskConfig> {
    vec![
        TaskConfig::Mqar(MqarConfig::new(64, 8, 64, 8, seed)),
        TaskConfig::Mqar(MqarConfig {
            interleaved: true,
            ..MqarConfig::new(32, 4, 32, 4, seed)
        }),
        TaskConfig::SelectiveCopy(SelectiveCopyConfig::new(16, 4, 24, seed)),
        TaskConfig::Memorize(MemorizeConfig::new(16, 8, seed, seed)),
    ]
}

/// Whether every generator is reproducible from its seed.
pub fn tasks_are_deterministic(seed: u64) -> Result<bool> {
    for task in task_suite(seed) {
        if task.generate(8, seed)? != task.generate(8, seed)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Masked query positions whose label is not the value that follows the
/// first occurrence of the query key earlier in the sequence.
pub fn mqar_unreachable(seed: u64) -> Result<usize> {
    let mut bad = 0;
    for task in task_suite(seed).into_iter().filter(|t| t.name() == "mqar") {
        let b = task.generate(16, seed)?;
        for s in 0..b.batch {
            let (tokens, labels, mask) = b.sequence(s);
            for p in (0..tokens.len()).filter(|&p| mask[p]) {
                let first = tokens[..p].iter().position(|&x| x == tokens[p]);
                match first {
                    Some(j) if j + 1 < p && tokens[j + 1] == labels[p] => {}
                    _ => bad += 1,
                }
            }
        }
    }
    Ok(bad)
}
