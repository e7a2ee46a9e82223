//! Reweighted zero-sum softmax over a single query row.
//!
//! For logits `s` over a prefix of length `t`, the softmax row splits as
//! `softmax = 1/t + delta/t + eps` with `delta = s - mean(s)`. Dropping the
//! uniform `1/t` part and gating the other two gives weights that sum to
//! zero:
//!
//! ```text
//! w_i = g1 * delta_i / t + gh * eps_i   (+ g0 / t when the zero-order term is kept)
//! ```

use crate::error::{Error, Result};
use crate::real::Real;

/// Gate values for the zero-order, first-order and higher-order terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gates<T> {
    pub zero: T,
    pub first: T,
    pub higher: T,
}

impl<T: Real> Gates<T> {
    pub fn new(zero: T, first: T, higher: T) -> Self {
        Self { zero, first, higher }
    }

    /// First- and higher-order gates only; the zero-order gate is 0.
    pub fn zero_sum(first: T, higher: T) -> Self {
        Self::new(T::zero(), first, higher)
    }

    pub fn validate(&self, include_zero_order: bool) -> Result<()> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(self.first) || !unit(self.higher) {
            return Err(Error::Contract(format!(
                "gates must lie in [0, 1], got first={} higher={}",
                self.first, self.higher
            )));
        }
        if include_zero_order && self.zero.abs() > T::one() {
            return Err(Error::Contract(format!(
                "zero-order gate must lie in [-1, 1], got {}",
                self.zero
            )));
        }
        Ok(())
    }
}

/// How the higher-order residual is formed. Anything but `Exact` breaks the
/// zero-sum property and exists for fault-injection runs of the verifier.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Residual {
    #[default]
    Exact,
    /// Uses the raw softmax row in place of `eps`.
    SkipCorrections,
}

/// Full per-query decomposition of the reweighted zero-sum softmax.
#[derive(Clone, Debug)]
pub struct ZeroSWeightRow<T> {
    /// Query step, 1-based; equals the prefix length.
    pub t: usize,
    pub s: Vec<T>,
    pub s_bar: T,
    pub delta: Vec<T>,
    pub softmax: Vec<T>,
    pub eps: Vec<T>,
    pub gates: Gates<T>,
    pub w: Vec<T>,
}

impl<T: Real> ZeroSWeightRow<T> {
    pub fn compute(s: &[T], gates: Gates<T>, include_zero_order: bool) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Contract("zero-sum weights need t >= 1".into()));
        }
        gates.validate(include_zero_order)?;
        let t = s.len();
        let tf = T::from_usize_(t);
        let s_bar = s.iter().copied().sum::<T>() / tf;
        let delta: Vec<T> = s.iter().map(|&v| v - s_bar).collect();
        let softmax = softmax(s);
        let eps: Vec<T> = softmax
            .iter()
            .zip(&delta)
            .map(|(&p, &d)| p - T::one() / tf - d / tf)
            .collect();
        let mut w = vec![T::zero(); t];
        fill_weights(&delta, &softmax, gates, include_zero_order, Residual::Exact, &mut w);
        Ok(Self {
            t,
            s: s.to_vec(),
            s_bar,
            delta,
            softmax,
            eps,
            gates,
            w,
        })
    }
}

/// Max-subtracted softmax of a non-empty slice.
pub fn softmax<T: Real>(s: &[T]) -> Vec<T> {
    let mx = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut p: Vec<T> = s.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = p.iter().copied().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Zero-sum weights for one query row.
///
/// With `include_zero_order == false` the result sums to zero up to
/// rounding.
pub fn zero_sum_weights<T: Real>(s: &[T], gates: Gates<T>, include_zero_order: bool) -> Result<Vec<T>> {
    zero_sum_weights_with(s, gates, include_zero_order, Residual::Exact)
}

#[doc(hidden)]
pub fn zero_sum_weights_with<T: Real>(
    s: &[T],
    gates: Gates<T>,
    include_zero_order: bool,
    residual: Residual,
) -> Result<Vec<T>> {
    if s.is_empty() {
        return Err(Error::Contract("zero-sum weights need t >= 1".into()));
    }
    gates.validate(include_zero_order)?;
    let t = T::from_usize_(s.len());
    let s_bar = s.iter().copied().sum::<T>() / t;
    let delta: Vec<T> = s.iter().map(|&v| v - s_bar).collect();
    let p = softmax(s);
    let mut w = vec![T::zero(); s.len()];
    fill_weights(&delta, &p, gates, include_zero_order, residual, &mut w);
    Ok(w)
}

/// Writes `w` from precomputed centered logits and softmax row.
pub(crate) fn fill_weights<T: Real>(
    delta: &[T],
    softmax: &[T],
    gates: Gates<T>,
    include_zero_order: bool,
    residual: Residual,
    w: &mut [T],
) {
    let t = T::from_usize_(delta.len());
    let inv_t = T::one() / t;
    let zero = if include_zero_order {
        gates.zero * inv_t
    } else {
        T::zero()
    };
    for i in 0..delta.len() {
        let first = delta[i] * inv_t;
        let eps = match residual {
            Residual::Exact => softmax[i] - inv_t - first,
            Residual::SkipCorrections => softmax[i],
        };
        w[i] = gates.first * first + gates.higher * eps + zero;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_gates_open_is_softmax_minus_uniform() {
        let s = [0.0, 3f64.ln()];
        let w = zero_sum_weights(&s, Gates::zero_sum(1.0, 1.0), false).unwrap();
        assert!((w[0] + 0.25).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn first_order_only() {
        let s = [0.0, 3f64.ln()];
        let w = zero_sum_weights(&s, Gates::zero_sum(1.0, 0.0), false).unwrap();
        // delta = -/+ ln(3)/2, divided by t = 2
        let half = 3f64.ln() / 4.0;
        assert!((w[0] + half).abs() < 1e-15);
        assert!((w[1] - half).abs() < 1e-15);
        assert!((half - 0.274653).abs() < 1e-6);
    }

    #[test]
    fn equal_logits_give_zero() {
        let w = zero_sum_weights(&[1.7; 9], Gates::zero_sum(0.3, 0.8), false).unwrap();
        assert!(w.iter().all(|v: &f64| v.abs() < 1e-15));
    }

    #[test]
    fn empty_row_is_a_contract_error() {
        let r = zero_sum_weights::<f64>(&[], Gates::zero_sum(0.5, 0.5), false);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn gates_out_of_range() {
        assert!(zero_sum_weights(&[0.0, 1.0], Gates::zero_sum(1.5, 0.5), false).is_err());
        assert!(zero_sum_weights(&[0.0, 1.0], Gates::new(-2.0, 0.5, 0.5), true).is_err());
        // zero-order gate is ignored when the term is off
        assert!(zero_sum_weights(&[0.0, 1.0], Gates::new(-2.0, 0.5, 0.5), false).is_ok());
    }

    #[test]
    fn zero_order_adds_uniform_mass() {
        let s = [0.2, -1.0, 0.7, 2.0];
        let w = zero_sum_weights(&s, Gates::new(0.6, 0.4, 0.9), true).unwrap();
        let total: f64 = w.iter().sum();
        assert!((total - 0.6).abs() < 1e-14);
    }

    #[test]
    fn decomposition_identity() {
        let s = [0.5, -2.0, 1.25, 3.0, 0.0];
        let row = ZeroSWeightRow::compute(&s, Gates::zero_sum(0.3, 0.7), false).unwrap();
        let t = row.t as f64;
        for i in 0..row.t {
            let rebuilt = 1.0 / t + row.delta[i] / t + row.eps[i];
            assert!((rebuilt - row.softmax[i]).abs() < 1e-15);
        }
        assert!(row.delta.iter().sum::<f64>().abs() < 1e-12);
        assert!(row.eps.iter().sum::<f64>().abs() < 1e-12);
        assert!(row.w.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn skipped_corrections_break_zero_sum() {
        let s = [0.0, 1.0, 2.0];
        let w = zero_sum_weights_with(&s, Gates::zero_sum(0.5, 0.5), false, Residual::SkipCorrections).unwrap();
        assert!((w.iter().sum::<f64>() - 0.5).abs() < 1e-14);
    }
}
