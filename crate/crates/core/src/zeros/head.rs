//! Single-head entry points: raw projections in, attention output out.

use super::kernels::{self, HeadView};
use super::logits::{deviation_logits_into, soft_clamp, DeviationLogitParams};
use super::rope::RopeTable;
use crate::config::{AttentionConfig, DIRECTION_EPS};
use crate::error::{Error, Result};
use crate::real::{norm, sigmoid, Real};

/// Raw per-head projections for one sequence of length `n`.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs<'a, T> {
    pub n: usize,
    /// `n x h` each.
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub u: &'a [T],
    /// `n x 3`, columns `[zero-order, first-order, higher-order]`.
    pub gate_logits: &'a [T],
}

/// Which kernel evaluates the prepared head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ZerosKernel {
    /// Dense for short sequences, scan otherwise.
    #[default]
    Auto,
    Scan,
    /// Separable form as `n x n` products.
    Dense,
    /// Explicit softmax-residual weights; the oracle.
    Naive,
    ThreeScan,
}

impl ZerosKernel {
    /// `Auto` resolved for a head of width `h` over `n` positions.
    pub fn resolve(self, n: usize, h: usize) -> Self {
        match self {
            ZerosKernel::Auto if kernels::prefer_dense(n, h) => ZerosKernel::Dense,
            ZerosKernel::Auto => ZerosKernel::Scan,
            k => k,
        }
    }
}

/// Inputs after normalization, rotation, logit and gate evaluation.
#[derive(Clone, Debug)]
pub struct PreparedHead<T> {
    pub n: usize,
    pub h: usize,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub s: Vec<T>,
    pub g0: Vec<T>,
    pub g1: Vec<T>,
    pub gh: Vec<T>,
}

impl<T: Real> PreparedHead<T> {
    pub fn view<'a>(&'a self, v: &'a [T]) -> HeadView<'a, T> {
        HeadView {
            n: self.n,
            h: self.h,
            q: &self.q,
            k: &self.k,
            v,
            s: &self.s,
            g0: &self.g0,
            g1: &self.g1,
            gh: &self.gh,
        }
    }
}

/// Scales each row of `x` (`n x h`) to unit length (`|x| + eps` in the
/// denominator).
pub fn unit_rows<T: Real>(x: &[T], h: usize) -> Vec<T> {
    let eps = T::c(DIRECTION_EPS);
    let mut out = x.to_vec();
    for row in out.chunks_mut(h) {
        let d = norm(row) + eps;
        for v in row {
            *v /= d;
        }
    }
    out
}

pub fn prepare_head<T: Real>(
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
    rope: Option<&RopeTable>,
) -> Result<PreparedHead<T>> {
    let (n, h) = (x.n, params.mu.len());
    if h == 0 {
        return Err(Error::dim("head_dim must be >= 1"));
    }
    for (name, len, want) in [
        ("q", x.q.len(), n * h),
        ("k", x.k.len(), n * h),
        ("v", x.v.len(), n * h),
        ("u", x.u.len(), n * h),
        ("gate_logits", x.gate_logits.len(), n * 3),
    ] {
        if len != want {
            return Err(Error::dim(format!("{name}: expected {want} values, got {len}")));
        }
    }
    let mut q = unit_rows(x.q, h);
    let mut k = unit_rows(x.k, h);
    if cfg.use_rope {
        let owned;
        let table = match rope {
            Some(t) => t,
            None => {
                owned = RopeTable::new(n.max(1), h)?;
                &owned
            }
        };
        table.rotate(&mut q, n)?;
        table.rotate(&mut k, n)?;
    }
    let mut s = vec![T::zero(); n];
    deviation_logits_into(x.u, h, &params.mu, params.tau, &mut s);
    let limit = T::c(cfg.clamp_s);
    for v in &mut s {
        *v = soft_clamp(*v, limit);
    }
    let col = |c: usize| -> Vec<T> { (0..n).map(|t| sigmoid(x.gate_logits[t * 3 + c])).collect() };
    let g0 = if cfg.include_zero_order {
        col(0)
    } else {
        vec![T::zero(); n]
    };
    Ok(PreparedHead {
        n,
        h,
        q,
        k,
        s,
        g0,
        g1: col(1),
        gh: col(2),
    })
}

/// Runs the chosen kernel; `cfg.causal == false` selects the encoder form
/// (the three-scan kernel is causal only).
pub fn zeros_forward_with<T: Real>(
    kernel: ZerosKernel,
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
    rope: Option<&RopeTable>,
) -> Result<Vec<T>> {
    let prep = prepare_head(x, params, cfg, rope)?;
    let view = prep.view(x.v);
    let mut out = vec![T::zero(); x.n * prep.h];
    match (kernel.resolve(x.n, prep.h), cfg.causal) {
        (ZerosKernel::Auto, _) => unreachable!("resolved above"),
        (ZerosKernel::Dense, causal) => kernels::dense_core(&view, causal, cfg.sqrt_decay, &mut out)?,
        (ZerosKernel::Scan, true) => kernels::scan_core(&view, cfg.sqrt_decay, &mut out)?,
        (ZerosKernel::Scan, false) => kernels::encoder_core(&view, cfg.sqrt_decay, &mut out)?,
        (ZerosKernel::Naive, causal) => kernels::naive_core(&view, causal, cfg.sqrt_decay, &mut out)?,
        (ZerosKernel::ThreeScan, true) => kernels::three_scan_core(&view, cfg.sqrt_decay, &mut out)?,
        (ZerosKernel::ThreeScan, false) => return Err(Error::Contract("the three-scan kernel is causal only".into())),
    }
    Ok(out)
}

/// Linear-time scan; the production path.
pub fn zeros_scan_forward<T: Real>(
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    zeros_forward_with(ZerosKernel::Scan, x, params, cfg, None)
}

/// Materialized `O(n^2)` reference.
pub fn zeros_naive_forward<T: Real>(
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    zeros_forward_with(ZerosKernel::Naive, x, params, cfg, None)
}

/// Non-causal form: all sums run over the whole sequence.
pub fn zeros_encoder_forward<T: Real>(
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    let cfg = AttentionConfig {
        causal: false,
        ..cfg.clone()
    };
    zeros_forward_with(ZerosKernel::Scan, x, params, &cfg, None)
}

/// Causal output built from three plain linear-attention scans.
pub fn zeros_three_scan_forward<T: Real>(
    x: &HeadInputs<'_, T>,
    params: &DeviationLogitParams<T>,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    zeros_forward_with(ZerosKernel::ThreeScan, x, params, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mechanism;
    use crate::rng::SeededRng;

    struct Case {
        n: usize,
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        u: Vec<f64>,
        g: Vec<f64>,
        params: DeviationLogitParams<f64>,
    }

    impl Case {
        fn random(n: usize, h: usize, seed: u64) -> Self {
            let mut r = SeededRng::new(seed);
            Self {
                n,
                q: r.normal_vec(n * h, 1.0),
                k: r.normal_vec(n * h, 1.0),
                v: r.normal_vec(n * h, 1.0),
                u: r.normal_vec(n * h, 1.0),
                g: r.normal_vec(n * 3, 1.5),
                params: DeviationLogitParams {
                    mu: r.normal_vec(h, 0.5),
                    tau: r.uniform(-1.0, 1.0),
                },
            }
        }

        fn inputs(&self) -> HeadInputs<'_, f64> {
            HeadInputs {
                n: self.n,
                q: &self.q,
                k: &self.k,
                v: &self.v,
                u: &self.u,
                gate_logits: &self.g,
            }
        }
    }

    fn cfg(h: usize) -> AttentionConfig {
        AttentionConfig::new(h, 1, Mechanism::Zeros)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_token_is_zero() {
        let c = Case::random(1, 4, 3);
        for f in [zeros_scan_forward::<f64>, zeros_naive_forward, zeros_encoder_forward] {
            let o = f(&c.inputs(), &c.params, &cfg(4)).unwrap();
            assert!(o.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn scan_matches_naive() {
        for seed in 0..4 {
            let c = Case::random(8, 4, seed);
            for sqrt_decay in [false, true] {
                let cf = AttentionConfig {
                    sqrt_decay,
                    include_zero_order: seed % 2 == 1,
                    ..cfg(4)
                };
                let a = zeros_scan_forward(&c.inputs(), &c.params, &cf).unwrap();
                let b = zeros_naive_forward(&c.inputs(), &c.params, &cf).unwrap();
                assert!(max_diff(&a, &b) < 1e-10);
            }
        }
    }

    #[test]
    fn encoder_matches_naive() {
        let c = Case::random(32, 6, 9);
        let cf = AttentionConfig {
            causal: false,
            ..cfg(6)
        };
        let a = zeros_encoder_forward(&c.inputs(), &c.params, &cf).unwrap();
        let b = zeros_naive_forward(&c.inputs(), &c.params, &cf).unwrap();
        assert!(max_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn dense_matches_naive() {
        for (seed, causal) in [(0, true), (1, true), (2, false), (3, false)] {
            let c = Case::random(12, 4, seed);
            let cf = AttentionConfig {
                causal,
                sqrt_decay: seed % 2 == 1,
                include_zero_order: seed >= 2,
                ..cfg(4)
            };
            let a = zeros_forward_with(ZerosKernel::Dense, &c.inputs(), &c.params, &cf, None).unwrap();
            let b = zeros_naive_forward(&c.inputs(), &c.params, &cf).unwrap();
            assert!(max_diff(&a, &b) < 1e-10);
        }
        assert_eq!(ZerosKernel::Auto.resolve(64, 32), ZerosKernel::Dense);
        assert_eq!(ZerosKernel::Auto.resolve(4096, 32), ZerosKernel::Scan);
    }

    #[test]
    fn three_scans_match_fused() {
        let c = Case::random(24, 4, 11);
        let a = zeros_scan_forward(&c.inputs(), &c.params, &cfg(4)).unwrap();
        let b = zeros_three_scan_forward(&c.inputs(), &c.params, &cfg(4)).unwrap();
        assert!(max_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn shape_mismatch() {
        let mut c = Case::random(4, 4, 1);
        c.v.pop();
        assert!(matches!(
            zeros_scan_forward(&c.inputs(), &c.params, &cfg(4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn single_precision_tracks_double() {
        let c = Case::random(16, 4, 5);
        let a = zeros_scan_forward(&c.inputs(), &c.params, &cfg(4)).unwrap();
        let f = |x: &[f64]| x.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let (q, k, v, u, g) = (f(&c.q), f(&c.k), f(&c.v), f(&c.u), f(&c.g));
        let p = DeviationLogitParams {
            mu: f(&c.params.mu),
            tau: c.params.tau as f32,
        };
        let x = HeadInputs {
            n: 16,
            q: &q,
            k: &k,
            v: &v,
            u: &u,
            gate_logits: &g,
        };
        let b = zeros_scan_forward(&x, &p, &cfg(4)).unwrap();
        let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        assert!(max_diff(&a, &b) < 1e-4);
    }
}
