//! Which weight vectors a mechanism can express.
//!
//! Softmax-minus-uniform rows live in the convex-deviation set
//! `{w : sum w = 0, w_i >= -1/t}`. Zero-sum weights drop the lower bound;
//! together with a uniform term they reach the whole affine hull of the
//! values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on `sum w` in [`convex_deviation_feasible`].
pub const SUM_TOL: f64 = 1e-9;
/// Slack on the per-entry lower bound `-1/t`.
pub const BOUND_TOL: f64 = 1e-12;

/// True iff `w` sums to zero and no entry falls below `-1/t`.
pub fn convex_deviation_feasible(w: &[f64]) -> bool {
    if w.is_empty() {
        return true;
    }
    let t = w.len() as f64;
    let sum: f64 = w.iter().sum();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    sum.abs() <= SUM_TOL && min >= -1.0 / t - BOUND_TOL
}

/// Zero-sum coefficients `w` with `mean(v) + sum_i w_i v_i = target`.
///
/// `values` holds `n` rows of length `dim`. Solves
/// `[V^T; 1^T] w = [target - mean(v); 0]` in the least-squares sense and
/// returns `w` with the reconstruction residual norm.
pub fn zero_sum_offsets(values: &[f64], dim: usize, target: &[f64]) -> Result<(Vec<f64>, f64)> {
    if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) || target.len() != dim {
        return Err(Error::dim("zero_sum_offsets: values must be n x dim, target dim"));
    }
    let n = values.len() / dim;
    let mean: Vec<f64> = (0..dim)
        .map(|c| (0..n).map(|r| values[r * dim + c]).sum::<f64>() / n as f64)
        .collect();
    let a = DMatrix::from_fn(dim + 1, n, |r, c| if r < dim { values[c * dim + r] } else { 1.0 });
    let b = DVector::from_fn(dim + 1, |r, _| if r < dim { target[r] - mean[r] } else { 0.0 });
    let w = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::NumericDomain {
            op: "zero_sum_offsets",
            detail: e.to_string(),
        })?;
    let residual = (&a * &w - &b).norm();
    Ok((w.iter().copied().collect(), residual))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_difference_is_infeasible() {
        assert!(!convex_deviation_feasible(&[1.0, -1.0]));
        for t in 3..10 {
            let mut w = vec![0.0; t];
            w[0] = 1.0;
            w[1] = -1.0;
            assert!(!convex_deviation_feasible(&w));
        }
    }

    #[test]
    fn boundary_and_zero() {
        assert!(convex_deviation_feasible(&[0.5, -0.5]));
        assert!(convex_deviation_feasible(&[0.0; 7]));
        assert!(!convex_deviation_feasible(&[0.2, 0.1]));
    }

    #[test]
    fn affine_combination_is_recovered() {
        let v = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let lam = [0.1, 0.2, -0.4, 1.1];
        let y: Vec<f64> = (0..3).map(|c| (0..4).map(|r| lam[r] * v[r * 3 + c]).sum()).collect();
        let (w, res) = zero_sum_offsets(&v, 3, &y).unwrap();
        assert!(res < 1e-12);
        for i in 0..4 {
            assert!((w[i] - (lam[i] - 0.25)).abs() < 1e-12);
        }
    }
}
