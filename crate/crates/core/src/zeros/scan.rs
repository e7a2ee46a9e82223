//! Linear-time recurrence for zero-sum attention.
//!
//! With logits that depend only on the key step, every weight splits into a
//! part separable in `(t, i)`:
//!
//! ```text
//! r[t,i] = alpha_t * e^{s_i} + beta_t * s_i + gamma_t
//! ```
//!
//! so the output is a readout of three `h x h` running sums `F`, `G`, `H`
//! (keyed by `e^{s_i}`, `s_i` and `1`) plus the scalars `E` and `P`.

use super::weights::Gates;
use crate::error::{Error, Result};
use crate::real::Real;

/// Running prefix sums carried from step to step.
///
/// `e` and `f` are stored relative to the running maximum `m`:
/// `E = e * exp(m)` and `F = f * exp(m)`. Whenever a larger logit arrives
/// both are rescaled so the un-shifted values are preserved.
#[derive(Clone, Debug)]
pub struct ScanState<T> {
    head_dim: usize,
    e: T,
    m: T,
    p: T,
    f: Vec<T>,
    g: Vec<T>,
    h: Vec<T>,
    t: usize,
}

/// Readout coefficients for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReadoutCoefficients<T> {
    /// `gh / E` against the un-shifted `E`.
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    /// `gh / e`, the factor that pairs with the shifted `f`.
    pub alpha_shifted: T,
}

impl<T: Real> ScanState<T> {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            e: T::zero(),
            m: T::zero(),
            p: T::zero(),
            f: vec![T::zero(); head_dim * head_dim],
            g: vec![T::zero(); head_dim * head_dim],
            h: vec![T::zero(); head_dim * head_dim],
            t: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Number of steps absorbed so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn running_max(&self) -> T {
        self.m
    }

    pub fn shifted_exp_sum(&self) -> T {
        self.e
    }

    /// `E = sum e^{s_i}`; may overflow in single precision for large logits.
    pub fn exp_sum(&self) -> T {
        self.e * self.m.exp()
    }

    pub fn logit_sum(&self) -> T {
        self.p
    }

    pub fn f_shifted(&self) -> &[T] {
        &self.f
    }

    pub fn g(&self) -> &[T] {
        &self.g
    }

    pub fn h(&self) -> &[T] {
        &self.h
    }

    /// Bytes held by the state: three `h x h` matrices, three scalars and a
    /// step counter. Independent of how many steps were absorbed.
    pub fn state_bytes(&self) -> usize {
        Self::bytes_for(self.head_dim)
    }

    pub fn bytes_for(head_dim: usize) -> usize {
        (3 * head_dim * head_dim + 3) * std::mem::size_of::<T>() + std::mem::size_of::<usize>()
    }

    /// Absorbs step `(s, k, v)`; `k` should already be unit-normalized.
    pub fn push(&mut self, s: T, k: &[T], v: &[T]) {
        let hd = self.head_dim;
        debug_assert_eq!(k.len(), hd);
        debug_assert_eq!(v.len(), hd);
        if self.t == 0 {
            self.m = s;
        } else if s > self.m {
            let r = (self.m - s).exp();
            self.e *= r;
            for x in &mut self.f {
                *x *= r;
            }
            self.m = s;
        }
        let es = (s - self.m).exp();
        self.e += es;
        self.p += s;
        for (a, &ka) in k.iter().enumerate() {
            let row = a * hd..(a + 1) * hd;
            let (f, g, h) = (&mut self.f[row.clone()], &mut self.g[row.clone()], &mut self.h[row]);
            for j in 0..hd {
                let kv = ka * v[j];
                f[j] += es * kv;
                g[j] += s * kv;
                h[j] += kv;
            }
        }
        self.t += 1;
    }

    /// Coefficients for the current step count `t`.
    pub fn coefficients(&self, gates: Gates<T>) -> Result<ReadoutCoefficients<T>> {
        scan_coefficients(self, gates)
    }

    /// `out = q (alpha F + beta G + gamma H)`.
    pub fn readout(&self, q: &[T], c: &ReadoutCoefficients<T>, out: &mut [T]) {
        let hd = self.head_dim;
        for x in out.iter_mut() {
            *x = T::zero();
        }
        for (a, &qa) in q.iter().enumerate() {
            let (fa, ba, ga) = (qa * c.alpha_shifted, qa * c.beta, qa * c.gamma);
            let row = a * hd..(a + 1) * hd;
            let (f, g, h) = (&self.f[row.clone()], &self.g[row.clone()], &self.h[row]);
            for j in 0..hd {
                out[j] += fa * f[j] + ba * g[j] + ga * h[j];
            }
        }
    }
}

/// `alpha = gh/E`, `beta = (g1 - gh)/t`,
/// `gamma = (P/t^2 - 1/t) gh - (P/t^2) g1 + g0/t`.
pub fn scan_coefficients<T: Real>(state: &ScanState<T>, gates: Gates<T>) -> Result<ReadoutCoefficients<T>> {
    if state.t == 0 {
        return Err(Error::Contract("scan coefficients need t >= 1".into()));
    }
    if !(state.e > T::zero()) {
        return Err(Error::NumericDomain {
            op: "scan_coefficients",
            detail: format!("exp-sum {} is not positive", state.e),
        });
    }
    let t = T::from_usize_(state.t);
    let pt2 = state.p / (t * t);
    let alpha_shifted = gates.higher / state.e;
    Ok(ReadoutCoefficients {
        alpha: alpha_shifted * (-state.m).exp(),
        beta: (gates.first - gates.higher) / t,
        gamma: (pt2 - T::one() / t) * gates.higher - pt2 * gates.first + gates.zero / t,
        alpha_shifted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_logit() {
        let mut st = ScanState::<f64>::new(2);
        st.push(0.0, &[1.0, 0.0], &[0.5, -2.0]);
        let c = st.coefficients(Gates::zero_sum(1.0, 1.0)).unwrap();
        assert_eq!(st.exp_sum(), 1.0);
        assert_eq!(st.logit_sum(), 0.0);
        assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 0.0, -1.0));
        let mut out = [9.0; 2];
        st.readout(&[1.0, 0.0], &c, &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn closed_gates_give_zero_coefficients() {
        let mut st = ScanState::<f64>::new(1);
        st.push(1.3, &[1.0], &[2.0]);
        st.push(-0.4, &[1.0], &[3.0]);
        let c = st.coefficients(Gates::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((c.alpha, c.beta, c.gamma), (0.0, 0.0, 0.0));
    }

    #[test]
    fn equal_gates_cancel_beta() {
        let mut st = ScanState::<f64>::new(1);
        for s in [0.2, 1.0, -0.5] {
            st.push(s, &[1.0], &[1.0]);
        }
        let c = st.coefficients(Gates::zero_sum(0.4, 0.4)).unwrap();
        assert_eq!(c.beta, 0.0);
    }

    #[test]
    fn rescaling_preserves_unshifted_sums() {
        let mut st = ScanState::<f64>::new(1);
        let logits = [-3.0, 5.0, 2.0, 7.5, 7.0];
        for &s in &logits {
            st.push(s, &[1.0], &[1.0]);
        }
        let e: f64 = logits.iter().map(|s| s.exp()).sum();
        assert!((st.exp_sum() - e).abs() <= 1e-12 * e);
        assert!((st.f_shifted()[0] * st.running_max().exp() - e).abs() <= 1e-12 * e);
        assert_eq!(st.running_max(), 7.5);
    }

    #[test]
    fn empty_state_has_no_coefficients() {
        let st = ScanState::<f64>::new(3);
        assert!(st.coefficients(Gates::zero_sum(0.5, 0.5)).is_err());
    }

    #[test]
    fn state_size_is_fixed() {
        let mut st = ScanState::<f64>::new(4);
        let before = st.state_bytes();
        for i in 0..100 {
            st.push(i as f64 * 0.01, &[0.5; 4], &[1.0; 4]);
        }
        assert_eq!(st.state_bytes(), before);
        assert_eq!(before, (3 * 16 + 3) * 8 + std::mem::size_of::<usize>());
    }
}
