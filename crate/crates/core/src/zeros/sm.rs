//! Quadratic zero-sum reweighting of dot-product softmax attention.
//!
//! Logits are `S = Q K^T / sqrt(h)`. Each row's statistics (mean, uniform
//! share) use only its valid prefix of length `L`:
//!
//! ```text
//! W[t,i] = g1_t * delta[t,i] / L + gh_t * (p[t,i] - 1/L - delta[t,i] / L)
//! O      = W V
//! ```

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::tensor::{gemm, Layout};

fn check<T>(q: &[T], k: &[T], v: &[T], gate_logits: &[T], n: usize, h: usize) -> Result<()> {
    let nh = n * h;
    if h == 0 || q.len() != nh || k.len() != nh || v.len() != nh || gate_logits.len() != 2 * n {
        return Err(Error::dim(format!(
            "zeros_sm: inputs do not match n={n} h={h} with n x 2 gate logits"
        )));
    }
    Ok(())
}

#[inline]
fn prefix(causal: bool, n: usize, t: usize) -> usize {
    if causal {
        t + 1
    } else {
        n
    }
}

/// Row-stat products kept for the backward pass.
struct Rows<T> {
    /// Centered logits over each prefix.
    delta: Vec<T>,
    /// Softmax over each prefix.
    p: Vec<T>,
    g1: Vec<T>,
    gh: Vec<T>,
    w: Vec<T>,
}

fn rows<T: Real>(q: &[T], k: &[T], gate_logits: &[T], n: usize, h: usize, causal: bool) -> Rows<T> {
    let mut s = vec![T::zero(); n * n];
    let scale = T::one() / T::from_usize_(h).sqrt();
    gemm(n, h, n, scale, q, Layout::N, k, Layout::T, T::zero(), &mut s);
    let mut delta = vec![T::zero(); n * n];
    let mut p = vec![T::zero(); n * n];
    let mut w = vec![T::zero(); n * n];
    let g1: Vec<T> = (0..n).map(|t| sigmoid(gate_logits[2 * t])).collect();
    let gh: Vec<T> = (0..n).map(|t| sigmoid(gate_logits[2 * t + 1])).collect();
    for t in 0..n {
        let l = prefix(causal, n, t);
        let lf = T::from_usize_(l);
        let row = t * n..t * n + l;
        let st = &s[row.clone()];
        let mean = st.iter().copied().sum::<T>() / lf;
        let mx = st.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for i in 0..l {
            let e = (st[i] - mx).exp();
            p[t * n + i] = e;
            z += e;
        }
        for i in 0..l {
            let j = t * n + i;
            p[j] /= z;
            delta[j] = st[i] - mean;
            let first = delta[j] / lf;
            w[j] = g1[t] * first + gh[t] * (p[j] - T::one() / lf - first);
        }
    }
    Rows { delta, p, g1, gh, w }
}

/// Materialized `n x n` weights (zero above the diagonal when causal).
pub fn zeros_sm_weights<T: Real>(
    q: &[T],
    k: &[T],
    gate_logits: &[T],
    n: usize,
    h: usize,
    causal: bool,
) -> Result<Vec<T>> {
    check(q, k, q, gate_logits, n, h)?;
    Ok(rows(q, k, gate_logits, n, h, causal).w)
}

/// `q`, `k`, `v` are `n x h`; `gate_logits` is `n x 2` with columns
/// `[first-order, higher-order]`.
pub fn zeros_sm_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    gate_logits: &[T],
    n: usize,
    h: usize,
    causal: bool,
) -> Result<Vec<T>> {
    check(q, k, v, gate_logits, n, h)?;
    let w = rows(q, k, gate_logits, n, h, causal).w;
    let mut out = vec![T::zero(); n * h];
    gemm(n, n, h, T::one(), &w, Layout::N, v, Layout::N, T::zero(), &mut out);
    Ok(out)
}

/// Input gradients of [`zeros_sm_forward`] for upstream `d_out`.
pub struct ZerosSmGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub gate_logits: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn zeros_sm_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gate_logits: &[f64],
    n: usize,
    h: usize,
    causal: bool,
    d_out: &[f64],
) -> Result<ZerosSmGrads> {
    check(q, k, v, gate_logits, n, h)?;
    if d_out.len() != n * h {
        return Err(Error::dim("zeros_sm: upstream gradient shape"));
    }
    let r = rows(q, k, gate_logits, n, h, causal);
    let mut dw = vec![0.0; n * n];
    gemm(n, h, n, 1.0, d_out, Layout::N, v, Layout::T, 0.0, &mut dw);
    let mut dv = vec![0.0; n * h];
    gemm(n, n, h, 1.0, &r.w, Layout::T, d_out, Layout::N, 0.0, &mut dv);
    let mut ds = vec![0.0; n * n];
    let mut dgl = vec![0.0; 2 * n];
    for t in 0..n {
        let l = prefix(causal, n, t);
        let lf = l as f64;
        let base = t * n;
        let (g1, gh) = (r.g1[t], r.gh[t]);
        let (mut dg1, mut dgh) = (0.0, 0.0);
        let c = (g1 - gh) / lf;
        let mut dp_dot = 0.0;
        let mut ddelta_sum = 0.0;
        for i in 0..l {
            let j = base + i;
            let first = r.delta[j] / lf;
            dg1 += dw[j] * first;
            dgh += dw[j] * (r.p[j] - 1.0 / lf - first);
            dp_dot += r.p[j] * gh * dw[j];
            ddelta_sum += c * dw[j];
        }
        let ddelta_mean = ddelta_sum / lf;
        for i in 0..l {
            let j = base + i;
            ds[j] = r.p[j] * (gh * dw[j] - dp_dot) + c * dw[j] - ddelta_mean;
        }
        dgl[2 * t] = dg1 * g1 * (1.0 - g1);
        dgl[2 * t + 1] = dgh * gh * (1.0 - gh);
    }
    let scale = 1.0 / (h as f64).sqrt();
    let mut dq = vec![0.0; n * h];
    let mut dk = vec![0.0; n * h];
    gemm(n, n, h, scale, &ds, Layout::N, k, Layout::N, 0.0, &mut dq);
    gemm(n, n, h, scale, &ds, Layout::T, q, Layout::N, 0.0, &mut dk);
    Ok(ZerosSmGrads {
        q: dq,
        k: dk,
        v: dv,
        gate_logits: dgl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::zeros::weights::{zero_sum_weights, Gates};

    #[test]
    fn first_row_is_zero() {
        let mut r = SeededRng::new(1);
        let (q, k, v, g) = (
            r.normal_vec::<f64>(12, 1.0),
            r.normal_vec(12, 1.0),
            r.normal_vec(12, 1.0),
            r.normal_vec(6, 1.0),
        );
        let o = zeros_sm_forward(&q, &k, &v, &g, 3, 4, true).unwrap();
        assert!(o[..4].iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn rows_sum_to_zero() {
        let mut r = SeededRng::new(2);
        let (q, k, g) = (
            r.normal_vec::<f64>(40, 2.0),
            r.normal_vec(40, 2.0),
            r.normal_vec(20, 1.0),
        );
        for causal in [true, false] {
            let w = zeros_sm_weights(&q, &k, &g, 10, 4, causal).unwrap();
            for row in w.chunks(10) {
                assert!(row.iter().sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn saturated_gates_give_softmax_minus_uniform() {
        let mut r = SeededRng::new(3);
        let (q, k) = (r.normal_vec::<f64>(24, 1.0), r.normal_vec(24, 1.0));
        let g = vec![60.0; 12];
        let w = zeros_sm_weights(&q, &k, &g, 6, 4, true).unwrap();
        for t in 0..6 {
            let s: Vec<f64> = (0..=t)
                .map(|i| (0..4).map(|a| q[t * 4 + a] * k[i * 4 + a]).sum::<f64>() / 2.0)
                .collect();
            let want = zero_sum_weights(&s, Gates::zero_sum(1.0, 1.0), false).unwrap();
            for i in 0..=t {
                assert!((w[t * 6 + i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_zero_weights() {
        let q = vec![0.0; 8];
        let k = vec![1.0; 8];
        let w = zeros_sm_weights(&q, &k, &[0.3; 8], 4, 2, true).unwrap();
        assert!(w.iter().all(|x: &f64| x.abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        assert!(zeros_sm_forward(&[0.0; 4], &[0.0; 4], &[0.0; 4], &[0.0; 3], 2, 2, true).is_err());
    }
}
