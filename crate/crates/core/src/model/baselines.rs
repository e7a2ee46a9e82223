//! Reference mechanisms: dot-product softmax attention and 1+ELU linear
//! attention. Single head, `n x h` row-major blocks.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, Layout};

/// Floor on the linear-attention normalizer.
pub const LINATTN_DEN_FLOOR: f64 = 1e-6;

fn check<T>(q: &[T], k: &[T], v: &[T], n: usize, h: usize, op: &str) -> Result<()> {
    let nh = n * h;
    if h == 0 || q.len() != nh || k.len() != nh || v.len() != nh {
        return Err(Error::dim(format!("{op}: q, k, v must each be {n} x {h}")));
    }
    Ok(())
}

#[inline]
fn visible(causal: bool, n: usize, t: usize) -> usize {
    if causal {
        t + 1
    } else {
        n
    }
}

/// Row-stochastic weights `softmax(Q K^T / sqrt(h))` under the mask, `n x n`.
pub fn softmax_weights<T: Real>(q: &[T], k: &[T], n: usize, h: usize, causal: bool) -> Result<Vec<T>> {
    check(q, k, q, n, h, "softmax_weights")?;
    let mut p = vec![T::zero(); n * n];
    let scale = T::one() / T::from_usize_(h).sqrt();
    gemm(n, h, n, scale, q, Layout::N, k, Layout::T, T::zero(), &mut p);
    for t in 0..n {
        let l = visible(causal, n, t);
        let row = &mut p[t * n..(t + 1) * n];
        let mx = row[..l].iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for x in &mut row[..l] {
            *x = (*x - mx).exp();
            z += *x;
        }
        for x in &mut row[..l] {
            *x /= z;
        }
        for x in &mut row[l..] {
            *x = T::zero();
        }
    }
    Ok(p)
}

/// Scaled dot-product softmax attention.
pub fn softmax_attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, h: usize, causal: bool) -> Result<Vec<T>> {
    check(q, k, v, n, h, "softmax_attention")?;
    let p = softmax_weights(q, k, n, h, causal)?;
    let mut out = vec![T::zero(); n * h];
    gemm(n, n, h, T::one(), &p, Layout::N, v, Layout::N, T::zero(), &mut out);
    Ok(out)
}

/// Gradients of a single-head mechanism with respect to `q`, `k`, `v`.
#[derive(Clone, Debug)]
pub struct QkvGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    h: usize,
    causal: bool,
    d_out: &[f64],
) -> Result<QkvGrads> {
    check(q, k, v, n, h, "softmax_attention")?;
    let p = softmax_weights(q, k, n, h, causal)?;
    let mut dp = vec![0.0; n * n];
    gemm(n, h, n, 1.0, d_out, Layout::N, v, Layout::T, 0.0, &mut dp);
    let mut dv = vec![0.0; n * h];
    gemm(n, n, h, 1.0, &p, Layout::T, d_out, Layout::N, 0.0, &mut dv);
    for t in 0..n {
        let row = t * n..(t + 1) * n;
        let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
        for j in row {
            dp[j] = p[j] * (dp[j] - dot);
        }
    }
    let scale = 1.0 / (h as f64).sqrt();
    let mut dq = vec![0.0; n * h];
    let mut dk = vec![0.0; n * h];
    gemm(n, n, h, scale, &dp, Layout::N, k, Layout::N, 0.0, &mut dq);
    gemm(n, n, h, scale, &dp, Layout::T, q, Layout::N, 0.0, &mut dk);
    Ok(QkvGrads { q: dq, k: dk, v: dv })
}

/// `1 + elu(x)`: `x + 1` for positive `x`, `e^x` otherwise.
#[inline]
pub fn elu_plus_one<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

#[inline]
fn elu_plus_one_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn feature_map<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| elu_plus_one(v)).collect()
}

/// Normalized linear attention with the `1 + elu` feature map, computed as
/// a running sum. The normalizer is floored at [`LINATTN_DEN_FLOOR`].
pub fn linattn_elu<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, h: usize, causal: bool) -> Result<Vec<T>> {
    check(q, k, v, n, h, "linattn_elu")?;
    let (fq, fk) = (feature_map(q), feature_map(k));
    let mut state = vec![T::zero(); h * h];
    let mut z = vec![T::zero(); h];
    let absorb = |i: usize, state: &mut [T], z: &mut [T]| {
        for a in 0..h {
            let ka = fk[i * h + a];
            z[a] += ka;
            for j in 0..h {
                state[a * h + j] += ka * v[i * h + j];
            }
        }
    };
    if !causal {
        for i in 0..n {
            absorb(i, &mut state, &mut z);
        }
    }
    let floor = T::c(LINATTN_DEN_FLOOR);
    let mut out = vec![T::zero(); n * h];
    for t in 0..n {
        if causal {
            absorb(t, &mut state, &mut z);
        }
        let qt = &fq[t * h..(t + 1) * h];
        let mut den = T::zero();
        for a in 0..h {
            den += qt[a] * z[a];
        }
        let den = den.max(floor);
        let o = &mut out[t * h..(t + 1) * h];
        for a in 0..h {
            for j in 0..h {
                o[j] += qt[a] * state[a * h + j];
            }
        }
        for x in o.iter_mut() {
            *x /= den;
        }
    }
    Ok(out)
}

/// Materialized `n x n` linear-attention weights
/// `phi(q_t) . phi(k_i) / sum_i phi(q_t) . phi(k_i)`.
pub fn linattn_weights<T: Real>(q: &[T], k: &[T], n: usize, h: usize, causal: bool) -> Result<Vec<T>> {
    check(q, k, q, n, h, "linattn_weights")?;
    let (fq, fk) = (feature_map(q), feature_map(k));
    let mut w = vec![T::zero(); n * n];
    gemm(n, h, n, T::one(), &fq, Layout::N, &fk, Layout::T, T::zero(), &mut w);
    let floor = T::c(LINATTN_DEN_FLOOR);
    for t in 0..n {
        let l = visible(causal, n, t);
        let row = &mut w[t * n..(t + 1) * n];
        let den = row[..l].iter().copied().sum::<T>().max(floor);
        for x in &mut row[..l] {
            *x /= den;
        }
        for x in &mut row[l..] {
            *x = T::zero();
        }
    }
    Ok(w)
}

pub fn linattn_elu_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    h: usize,
    causal: bool,
    d_out: &[f64],
) -> Result<QkvGrads> {
    check(q, k, v, n, h, "linattn_elu")?;
    let (fq, fk) = (feature_map(q), feature_map(k));
    let hh = h * h;
    let (mut state, mut z) = (vec![0.0; hh], vec![0.0; h]);
    let absorb = |i: usize, state: &mut [f64], z: &mut [f64]| {
        for a in 0..h {
            let ka = fk[i * h + a];
            z[a] += ka;
            for j in 0..h {
                state[a * h + j] += ka * v[i * h + j];
            }
        }
    };
    if !causal {
        for i in 0..n {
            absorb(i, &mut state, &mut z);
        }
    }
    let mut dfq = vec![0.0; n * h];
    let mut dnum = vec![0.0; n * h];
    let mut dden = vec![0.0; n];
    for t in 0..n {
        if causal {
            absorb(t, &mut state, &mut z);
        }
        let qt = &fq[t * h..(t + 1) * h];
        let raw: f64 = qt.iter().zip(&z).map(|(a, b)| a * b).sum();
        let den = raw.max(LINATTN_DEN_FLOOR);
        let dt = &d_out[t * h..(t + 1) * h];
        let mut num_dot = 0.0;
        for j in 0..h {
            let mut num = 0.0;
            for a in 0..h {
                num += qt[a] * state[a * h + j];
            }
            num_dot += num * dt[j];
            dnum[t * h + j] = dt[j] / den;
        }
        dden[t] = if raw > LINATTN_DEN_FLOOR {
            -num_dot / (den * den)
        } else {
            0.0
        };
        for a in 0..h {
            let mut acc = z[a] * dden[t];
            for j in 0..h {
                acc += state[a * h + j] * dnum[t * h + j];
            }
            dfq[t * h + a] = acc;
        }
    }
    // suffix (or total) sums of phi(q)^T dnum and phi(q) dden
    let (mut r, mut rz) = (vec![0.0; hh], vec![0.0; h]);
    let add = |t: usize, r: &mut [f64], rz: &mut [f64]| {
        for a in 0..h {
            let qa = fq[t * h + a];
            rz[a] += qa * dden[t];
            for j in 0..h {
                r[a * h + j] += qa * dnum[t * h + j];
            }
        }
    };
    if !causal {
        for t in 0..n {
            add(t, &mut r, &mut rz);
        }
    }
    let mut dk = vec![0.0; n * h];
    let mut dv = vec![0.0; n * h];
    for i in (0..n).rev() {
        if causal {
            add(i, &mut r, &mut rz);
        }
        for a in 0..h {
            let mut acc = rz[a];
            for j in 0..h {
                acc += r[a * h + j] * v[i * h + j];
                dv[i * h + j] += fk[i * h + a] * r[a * h + j];
            }
            dk[i * h + a] = acc * elu_plus_one_grad(k[i * h + a]);
        }
    }
    let dq = dfq.iter().zip(q).map(|(&d, &x)| d * elu_plus_one_grad(x)).collect();
    Ok(QkvGrads { q: dq, k: dk, v: dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand(n: usize, seed: u64) -> Vec<f64> {
        SeededRng::new(seed).normal_vec(n, 1.0)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = (rand(4, 1), rand(4, 2), rand(4, 3));
        let a = softmax_attention(&q, &k, &v, 1, 4, true).unwrap();
        let b = linattn_elu(&q, &k, &v, 1, 4, true).unwrap();
        assert!(max_diff(&a, &v) < 1e-15);
        assert!(max_diff(&b, &v) < 1e-12);
    }

    #[test]
    fn uniform_logits_average_values() {
        let q = vec![0.0; 12];
        let (k, v) = (rand(12, 4), rand(12, 5));
        let o = softmax_attention(&q, &k, &v, 4, 3, true).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                let mean = (0..=t).map(|i| v[i * 3 + j]).sum::<f64>() / (t + 1) as f64;
                assert!((o[t * 3 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = rand(15, 6);
        let k: Vec<f64> = rand(3, 7).repeat(5);
        let v = rand(15, 8);
        let o = linattn_elu(&q, &k, &v, 5, 3, false).unwrap();
        for j in 0..3 {
            let mean = (0..5).map(|i| v[i * 3 + j]).sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((o[t * 3 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linattn_matches_materialized() {
        let (q, k, v) = (rand(64, 9), rand(64, 10), rand(64, 11));
        for causal in [true, false] {
            let w = linattn_weights(&q, &k, 16, 4, causal).unwrap();
            let mut want = vec![0.0; 64];
            gemm(16, 16, 4, 1.0, &w, Layout::N, &v, Layout::N, 0.0, &mut want);
            let got = linattn_elu(&q, &k, &v, 16, 4, causal).unwrap();
            assert!(max_diff(&got, &want) < 1e-12);
        }
    }

    #[allow(clippy::type_complexity)]
    fn fd_check(
        fwd: fn(&[f64], &[f64], &[f64], usize, usize, bool) -> Result<Vec<f64>>,
        bwd: fn(&[f64], &[f64], &[f64], usize, usize, bool, &[f64]) -> Result<QkvGrads>,
    ) {
        let (n, h) = (5, 3);
        let w = rand(n * h, 20);
        for causal in [true, false] {
            let mut x = [rand(n * h, 21), rand(n * h, 22), rand(n * h, 23)];
            let g = bwd(&x[0], &x[1], &x[2], n, h, causal, &w).unwrap();
            let analytic = [g.q, g.k, g.v];
            let loss = |x: &[Vec<f64>; 3]| -> f64 {
                let o = fwd(&x[0], &x[1], &x[2], n, h, causal).unwrap();
                o.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            for p in 0..3 {
                for i in 0..n * h {
                    let x0 = x[p][i];
                    x[p][i] = x0 + 1e-6;
                    let lp = loss(&x);
                    x[p][i] = x0 - 1e-6;
                    let lm = loss(&x);
                    x[p][i] = x0;
                    let fd = (lp - lm) / 2e-6;
                    let a = analytic[p][i];
                    assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3));
                }
            }
        }
    }

    #[test]
    fn softmax_gradients() {
        fd_check(softmax_attention, softmax_attention_backward);
    }

    #[test]
    fn linattn_gradients() {
        fd_check(linattn_elu, linattn_elu_backward);
    }
}
