//! Central-difference oracle for tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_FLOOR: f64 = 1e-4;

/// Worst disagreement between tape and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares the tape gradient of `f` at `inputs` with central differences
/// of step `h` in every coordinate.
///
/// `f` rebuilds the computation on a fresh graph from the given leaves and
/// returns a scalar.
pub fn finite_diff_check<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite difference step must be > 0, got {h}")));
    }
    let eval = |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).item()?;
        let mut grads = Vec::new();
        if grad {
            g.backward(out)?;
            grads = vars.iter().map(|&v| g.grad(v)).collect();
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut xs = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let (fp, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = x0 - h;
            let (fm, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn sum_of_squares() {
        let mut r = SeededRng::new(1);
        let x = Tensor::uniform(vec![12], -1.0, 1.0, &mut r);
        let rep = finite_diff_check(
            &[x],
            |g, v| {
                let s = g.square(v[0])?;
                g.sum_all(s)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-7, "{rep:?}");
        assert_eq!(rep.checked, 12);
    }

    #[test]
    fn constant_function() {
        let rep = finite_diff_check(
            &[Tensor::vector(vec![0.3, -0.2])],
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            1e-5,
        )
        .unwrap();
        assert_eq!(rep.max_abs_err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(&[], |g, _| Ok(g.constant(Tensor::scalar(0.0))), 0.0).is_err());
    }
}
