//! Single-head forward kernels over prepared inputs.
//!
//! All kernels see the same prepared head: unit (and possibly rotated)
//! queries and keys, clamped deviation logits, and per-step gate values.
//! `scan_core` and `encoder_core` are the linear-time paths and
//! `dense_core` evaluates the same separable form as `n x n` products for
//! short sequences. `naive_core` materializes the weights from the explicit
//! softmax residual and serves as the oracle for all of them.

use super::scan::ScanState;
use super::weights::{fill_weights, softmax, Gates, Residual};
use crate::error::{Error, Result};
use crate::real::{dot, Real};
use crate::tensor::{gemm, Layout};

/// Borrowed, prepared inputs of one head over one sequence.
#[derive(Clone, Copy, Debug)]
pub struct HeadView<'a, T> {
    pub n: usize,
    pub h: usize,
    /// Unit queries, `n x h`.
    pub q: &'a [T],
    /// Unit keys, `n x h`.
    pub k: &'a [T],
    pub v: &'a [T],
    pub s: &'a [T],
    pub g0: &'a [T],
    pub g1: &'a [T],
    pub gh: &'a [T],
}

impl<T: Real> HeadView<'_, T> {
    fn gates(&self, t: usize) -> Gates<T> {
        Gates::new(self.g0[t], self.g1[t], self.gh[t])
    }

    pub(crate) fn check(&self) -> Result<()> {
        let nh = self.n * self.h;
        let ok = self.q.len() == nh
            && self.k.len() == nh
            && self.v.len() == nh
            && self.s.len() == self.n
            && self.g0.len() == self.n
            && self.g1.len() == self.n
            && self.gh.len() == self.n;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "head inputs do not match n={} h={}",
                self.n, self.h
            )))
        }
    }
}

#[inline]
fn decay<T: Real>(enabled: bool, t: usize) -> T {
    if enabled {
        T::one() / T::from_usize_(t).sqrt()
    } else {
        T::one()
    }
}

fn check_finite<T: Real>(op: &str, out: &[T], h: usize) -> Result<()> {
    match out.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            op: format!("{op} (position {})", i / h.max(1)),
            index: i,
        }),
        None => Ok(()),
    }
}

/// Causal scan: one left-to-right pass, `O(h^2)` per step.
pub fn scan_core<T: Real>(x: &HeadView<'_, T>, sqrt_decay: bool, out: &mut [T]) -> Result<()> {
    x.check()?;
    let h = x.h;
    let mut st = ScanState::new(h);
    for t in 0..x.n {
        let row = t * h..(t + 1) * h;
        st.push(x.s[t], &x.k[row.clone()], &x.v[row.clone()]);
        let mut c = st.coefficients(x.gates(t))?;
        let lam = decay::<T>(sqrt_decay, t + 1);
        c.alpha_shifted *= lam;
        c.beta *= lam;
        c.gamma *= lam;
        st.readout(&x.q[row.clone()], &c, &mut out[row]);
    }
    check_finite("zeros_scan", out, h)
}

/// Encoder form: every query reads the state over the whole sequence.
pub fn encoder_core<T: Real>(x: &HeadView<'_, T>, sqrt_decay: bool, out: &mut [T]) -> Result<()> {
    x.check()?;
    let h = x.h;
    let mut st = ScanState::new(h);
    for t in 0..x.n {
        let row = t * h..(t + 1) * h;
        st.push(x.s[t], &x.k[row.clone()], &x.v[row]);
    }
    let lam = decay::<T>(sqrt_decay, x.n);
    for t in 0..x.n {
        let row = t * h..(t + 1) * h;
        let mut c = st.coefficients(x.gates(t))?;
        c.alpha_shifted *= lam;
        c.beta *= lam;
        c.gamma *= lam;
        st.readout(&x.q[row.clone()], &c, &mut out[row]);
    }
    check_finite("zeros_encoder", out, h)
}

/// Radial weights `r[t,i]` as a dense `n x n` matrix (zero above the
/// diagonal when causal).
pub fn radial_weights<T: Real>(s: &[T], g0: &[T], g1: &[T], gh: &[T], causal: bool, residual: Residual) -> Vec<T> {
    let n = s.len();
    let mut r = vec![T::zero(); n * n];
    let full = if causal { None } else { Some(row_stats(s)) };
    for t in 0..n {
        let len = if causal { t + 1 } else { n };
        let gates = Gates::new(g0[t], g1[t], gh[t]);
        let row = &mut r[t * n..t * n + len];
        match &full {
            Some((delta, p)) => fill_weights(delta, p, gates, true, residual, row),
            None => {
                let (delta, p) = row_stats(&s[..len]);
                fill_weights(&delta, &p, gates, true, residual, row);
            }
        }
    }
    r
}

fn row_stats<T: Real>(s: &[T]) -> (Vec<T>, Vec<T>) {
    let mean = s.iter().copied().sum::<T>() / T::from_usize_(s.len());
    (s.iter().map(|&v| v - mean).collect(), softmax(s))
}

/// Full attention weights `W[t,i] = r[t,i] * <q_t, k_i>` (times the
/// optional `1/sqrt(t)` decay), materialized as `n x n`.
pub fn naive_weights<T: Real>(x: &HeadView<'_, T>, causal: bool, sqrt_decay: bool) -> Result<Vec<T>> {
    x.check()?;
    let n = x.n;
    let mut w = radial_weights(x.s, x.g0, x.g1, x.gh, causal, Residual::Exact);
    let mut cos = vec![T::zero(); n * n];
    gemm(n, x.h, n, T::one(), x.q, Layout::N, x.k, Layout::T, T::zero(), &mut cos);
    for t in 0..n {
        let lam = decay::<T>(sqrt_decay, if causal { t + 1 } else { n });
        for i in 0..n {
            w[t * n + i] *= cos[t * n + i] * lam;
        }
    }
    Ok(w)
}

/// `O(n^2 h)` reference: materialize the weights, then `O = W V`.
pub fn naive_core<T: Real>(x: &HeadView<'_, T>, causal: bool, sqrt_decay: bool, out: &mut [T]) -> Result<()> {
    let w = naive_weights(x, causal, sqrt_decay)?;
    gemm(x.n, x.n, x.h, T::one(), &w, Layout::N, x.v, Layout::N, T::zero(), out);
    check_finite("zeros_naive", out, x.h)
}

/// Sequences up to this multiple of the head width run faster as dense
/// `n x n` products than as scans.
pub const DENSE_MAX_RATIO: usize = 4;

pub fn prefer_dense(n: usize, h: usize) -> bool {
    n <= DENSE_MAX_RATIO * h
}

/// Per-query readout coefficients of the separable radial form
/// `r[t,i] = alpha_t e^{s_i - shift} + beta_t s_i + gamma_t`, with the
/// decay folded in. `shift` is the global max of `s`.
pub(crate) struct DenseCoeffs<T> {
    /// `e^{s_i - shift}`.
    pub es: Vec<T>,
    pub e: Vec<T>,
    pub p: Vec<T>,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
    pub lam: Vec<T>,
}

#[inline]
pub(crate) fn visible(causal: bool, n: usize, t: usize) -> usize {
    if causal {
        t + 1
    } else {
        n
    }
}

pub(crate) fn dense_coeffs<T: Real>(x: &HeadView<'_, T>, causal: bool, sqrt_decay: bool) -> DenseCoeffs<T> {
    let n = x.n;
    let shift = x.s.iter().copied().fold(T::neg_infinity(), T::max);
    let es: Vec<T> = x.s.iter().map(|&v| (v - shift).exp()).collect();
    let (mut e, mut p) = (vec![T::zero(); n], vec![T::zero(); n]);
    let (mut ea, mut pa) = (T::zero(), T::zero());
    for t in 0..n {
        ea += es[t];
        pa += x.s[t];
        e[t] = ea;
        p[t] = pa;
    }
    if !causal {
        e.fill(ea);
        p.fill(pa);
    }
    let mut c = DenseCoeffs {
        es,
        alpha: vec![T::zero(); n],
        beta: vec![T::zero(); n],
        gamma: vec![T::zero(); n],
        lam: vec![T::zero(); n],
        e,
        p,
    };
    for t in 0..n {
        let len = visible(causal, n, t);
        let lf = T::from_usize_(len);
        let pt2 = c.p[t] / (lf * lf);
        c.lam[t] = decay::<T>(sqrt_decay, len);
        c.alpha[t] = x.gh[t] / c.e[t];
        c.beta[t] = (x.g1[t] - x.gh[t]) / lf;
        c.gamma[t] = (pt2 - T::one() / lf) * x.gh[t] - pt2 * x.g1[t] + x.g0[t] / lf;
    }
    c
}

/// Weights in the separable form, `n x n`, zero above the diagonal when
/// causal. Same algebra as the scan, evaluated densely.
pub fn dense_weights<T: Real>(x: &HeadView<'_, T>, causal: bool, sqrt_decay: bool) -> Result<Vec<T>> {
    x.check()?;
    let n = x.n;
    let c = dense_coeffs(x, causal, sqrt_decay);
    let mut w = vec![T::zero(); n * n];
    gemm(n, x.h, n, T::one(), x.q, Layout::N, x.k, Layout::T, T::zero(), &mut w);
    for t in 0..n {
        let len = visible(causal, n, t);
        let row = &mut w[t * n..(t + 1) * n];
        for i in 0..len {
            row[i] *= c.lam[t] * (c.alpha[t] * c.es[i] + c.beta[t] * x.s[i] + c.gamma[t]);
        }
        row[len..].fill(T::zero());
    }
    Ok(w)
}

/// Dense evaluation for short sequences: `O(n^2 h)` in two gemms.
pub fn dense_core<T: Real>(x: &HeadView<'_, T>, causal: bool, sqrt_decay: bool, out: &mut [T]) -> Result<()> {
    let w = dense_weights(x, causal, sqrt_decay)?;
    gemm(x.n, x.n, x.h, T::one(), &w, Layout::N, x.v, Layout::N, T::zero(), out);
    check_finite("zeros_dense", out, x.h)
}

/// Plain (unnormalized) causal linear attention: `o_t = q_t sum_{i<=t} k_i^T v_i`.
pub fn linear_attention_scan<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, h: usize) -> Vec<T> {
    let mut state = vec![T::zero(); h * h];
    let mut out = vec![T::zero(); n * h];
    for t in 0..n {
        let (kt, vt) = (&k[t * h..(t + 1) * h], &v[t * h..(t + 1) * h]);
        for a in 0..h {
            for j in 0..h {
                state[a * h + j] += kt[a] * vt[j];
            }
        }
        let qt = &q[t * h..(t + 1) * h];
        let o = &mut out[t * h..(t + 1) * h];
        for a in 0..h {
            for j in 0..h {
                o[j] += qt[a] * state[a * h + j];
            }
        }
    }
    out
}

/// The same causal output assembled from three independent linear-attention
/// scans with key bases `e^{s_i} k_i`, `s_i k_i`, `k_i` and queries
/// reweighted by `alpha_t`, `beta_t`, `gamma_t`.
pub fn three_scan_core<T: Real>(x: &HeadView<'_, T>, sqrt_decay: bool, out: &mut [T]) -> Result<()> {
    x.check()?;
    let (n, h) = (x.n, x.h);
    let mut k1 = vec![T::zero(); n * h];
    let mut k2 = vec![T::zero(); n * h];
    let mut q1 = vec![T::zero(); n * h];
    let mut q2 = vec![T::zero(); n * h];
    let mut q3 = vec![T::zero(); n * h];
    let (mut e_sum, mut p_sum) = (T::zero(), T::zero());
    for t in 0..n {
        let es = x.s[t].exp();
        e_sum += es;
        p_sum += x.s[t];
        let tf = T::from_usize_(t + 1);
        let pt2 = p_sum / (tf * tf);
        let lam = decay::<T>(sqrt_decay, t + 1);
        let alpha = x.gh[t] / e_sum * lam;
        let beta = (x.g1[t] - x.gh[t]) / tf * lam;
        let gamma = ((pt2 - T::one() / tf) * x.gh[t] - pt2 * x.g1[t] + x.g0[t] / tf) * lam;
        for a in 0..h {
            let i = t * h + a;
            k1[i] = es * x.k[i];
            k2[i] = x.s[t] * x.k[i];
            q1[i] = alpha * x.q[i];
            q2[i] = beta * x.q[i];
            q3[i] = gamma * x.q[i];
        }
    }
    let o1 = linear_attention_scan(&q1, &k1, x.v, n, h);
    let o2 = linear_attention_scan(&q2, &k2, x.v, n, h);
    let o3 = linear_attention_scan(&q3, x.k, x.v, n, h);
    for i in 0..n * h {
        out[i] = o1[i] + o2[i] + o3[i];
    }
    check_finite("zeros_three_scan", out, h)
}

/// Cosine between query `t` and key `i` of a prepared head.
pub fn angular<T: Real>(x: &HeadView<'_, T>, t: usize, i: usize) -> T {
    let h = x.h;
    dot(&x.q[t * h..(t + 1) * h], &x.k[i * h..(i + 1) * h])
}
