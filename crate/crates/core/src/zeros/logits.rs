//! Deviation logits: how far each step's projection sits from the running
//! mean of the projections before it.
//!
//! ```text
//! ubar_i = (e^tau * mu + sum_{j<=i} u_j) / (e^tau + i)
//! s_i    = -(1/sqrt(h)) * <u_i, ubar_i>
//! ```
//!
//! `tau` is kept in log space so the prior strength `e^tau` stays positive.

use crate::error::{Error, Result};
use crate::real::Real;

/// Prior that smooths the running mean over the first few steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationLogitParams<T> {
    pub mu: Vec<T>,
    pub tau: T,
}

impl<T: Real> DeviationLogitParams<T> {
    pub fn zeros(head_dim: usize) -> Self {
        Self {
            mu: vec![T::zero(); head_dim],
            tau: T::zero(),
        }
    }

    pub fn prior_strength(&self) -> T {
        self.tau.exp()
    }
}

/// Deviation logits for one `N x h` block of projections `u`.
pub fn deviation_logits<T: Real>(u: &[T], n: usize, params: &DeviationLogitParams<T>) -> Result<Vec<T>> {
    let h = params.mu.len();
    if h == 0 {
        return Err(Error::dim("deviation logits need h >= 1"));
    }
    if u.len() != n * h {
        return Err(Error::dim(format!(
            "deviation logits: {} values is not {n} x {h}",
            u.len()
        )));
    }
    let mut s = vec![T::zero(); n];
    deviation_logits_into(u, h, &params.mu, params.tau, &mut s);
    Ok(s)
}

pub(crate) fn deviation_logits_into<T: Real>(u: &[T], h: usize, mu: &[T], tau: T, s: &mut [T]) {
    let prior = tau.exp();
    let scale = -T::one() / T::from_usize_(h).sqrt();
    let mut acc: Vec<T> = mu.iter().map(|&m| prior * m).collect();
    for (i, (ui, si)) in u.chunks(h).zip(s.iter_mut()).enumerate() {
        for (a, &x) in acc.iter_mut().zip(ui) {
            *a += x;
        }
        let denom = prior + T::from_usize_(i + 1);
        let mut d = T::zero();
        for (&x, &a) in ui.iter().zip(&acc) {
            d += x * a;
        }
        *si = scale * d / denom;
    }
}

/// Gradients of the deviation logits for one block. Accumulates into
/// `du`, `dmu` and returns the gradient for `tau`.
pub(crate) fn deviation_logits_backward(
    u: &[f64],
    h: usize,
    mu: &[f64],
    tau: f64,
    ds: &[f64],
    du: &mut [f64],
    dmu: &mut [f64],
) -> f64 {
    let n = ds.len();
    let prior = tau.exp();
    let scale = -1.0 / (h as f64).sqrt();
    // forward running means
    let mut means = vec![0.0; n * h];
    let mut acc: Vec<f64> = mu.iter().map(|&m| prior * m).collect();
    for i in 0..n {
        let denom = prior + (i + 1) as f64;
        for a in 0..h {
            acc[a] += u[i * h + a];
            means[i * h + a] = acc[a] / denom;
        }
    }
    // d acc_i accumulated in reverse; acc_i = prior*mu + sum_{j<=i} u_j
    let mut dacc_suffix = vec![0.0; h];
    let mut dprior = 0.0;
    for i in (0..n).rev() {
        let denom = prior + (i + 1) as f64;
        let ui = &u[i * h..(i + 1) * h];
        let mi = &means[i * h..(i + 1) * h];
        let g = ds[i] * scale;
        // s_i = scale * <u_i, mean_i>
        let mut dmean_dot_mean = 0.0;
        for a in 0..h {
            du[i * h + a] += g * mi[a];
            let dmean = g * ui[a];
            dmean_dot_mean += dmean * mi[a];
            dacc_suffix[a] += dmean / denom;
        }
        // mean_i = acc_i / denom_i and denom_i depends on prior
        dprior -= dmean_dot_mean / denom;
        for a in 0..h {
            du[i * h + a] += dacc_suffix[a];
        }
    }
    // acc_0 carries prior * mu into every step
    for a in 0..h {
        dmu[a] += prior * dacc_suffix[a];
        dprior += mu[a] * dacc_suffix[a];
    }
    dprior * prior
}

/// Smooth clamp `limit * tanh(x / limit)` onto `(-limit, limit)`.
#[inline]
pub fn soft_clamp<T: Real>(x: T, limit: T) -> T {
    limit * (x / limit).tanh()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(mu: Vec<f64>, prior: f64) -> DeviationLogitParams<f64> {
        DeviationLogitParams { mu, tau: prior.ln() }
    }

    #[test]
    fn single_step() {
        // ubar_1 = (0 + 2) / (1 + 1) = 1, s_1 = -2 * 1
        let s = deviation_logits(&[2.0], 1, &p(vec![0.0], 1.0)).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn two_steps() {
        // ubar_2 = 4 / 3, s_2 = -2 * 4/3
        let s = deviation_logits(&[2.0, 2.0], 2, &p(vec![0.0], 1.0)).unwrap();
        assert!((s[1] + 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_projection_zero_logits() {
        for tau in [-3.0, 0.0, 2.5] {
            let params = DeviationLogitParams { mu: vec![0.0; 4], tau };
            let s = deviation_logits(&[0.0; 12], 3, &params).unwrap();
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn causal() {
        let params = p(vec![0.3, -0.1], 2.0);
        let a = deviation_logits(&[1.0, 2.0, -1.0, 0.5, 3.0, 3.0], 3, &params).unwrap();
        let b = deviation_logits(&[1.0, 2.0, -1.0, 0.5, -9.0, 7.0], 3, &params).unwrap();
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(deviation_logits(&[1.0, 2.0, 3.0], 2, &p(vec![0.0, 0.0], 1.0)).is_err());
    }

    #[test]
    fn soft_clamp_bounds() {
        assert!(soft_clamp(1e6, 20.0) <= 20.0);
        assert!((soft_clamp(0.01f64, 20.0) - 0.01).abs() < 1e-8);
    }
}
