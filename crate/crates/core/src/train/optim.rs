//! Adam with decoupled weight decay and global-norm clipping.

use crate::error::{Error, Result};
use crate::model::params::decays;
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Max global gradient norm; `f64::INFINITY` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// Moment estimates laid out like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape().to_vec()));
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Diagnostics of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when not clipped).
    pub clip_scale: f64,
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected update. Clipping happens first, then the moments,
/// then `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)` where decay
/// applies only to parameters selected by [`decays`].
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepStats> {
    let grad_norm = global_norm(grads);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient norm".into(),
            index: 0,
        });
    }
    let clip_scale = if grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    let ps = params.named_mut();
    if grads.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::dim("adam_step: parameter, gradient and state layouts differ"));
    }
    for (((name, p), (_, g)), ((_, m), (_, v))) in ps.into_iter().zip(grads).zip(ms.into_iter().zip(vs)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::dim(format!("adam_step: shape mismatch for {name}")));
        }
        let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi * clip_scale;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            *pi -= cfg.lr * (update + wd * *pi);
        }
    }
    Ok(StepStats { grad_norm, clip_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mechanism;
    use crate::model::params::init;
    use crate::model::ModelConfig;

    fn setup() -> (ModelParams, AdamConfig) {
        let p = init(&ModelConfig::new(7, 1, 8, 2, 4, Mechanism::Zeros));
        (p, AdamConfig::default())
    }

    fn filled(p: &ModelParams, f: impl Fn(usize) -> f64) -> ModelParams {
        let mut k = 0;
        p.map(|_, t| {
            let data = (0..t.numel())
                .map(|_| {
                    k += 1;
                    f(k)
                })
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let (p0, mut cfg) = setup();
        cfg.weight_decay = 0.0;
        let mut p = p0.clone();
        let g = filled(&p, |_| 0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (p0, mut cfg) = setup();
        cfg.weight_decay = 0.0;
        cfg.grad_clip = f64::INFINITY;
        let mut p = p0.clone();
        // first-step closed form: m_hat = g, v_hat = g^2, update = g / (|g| + eps)
        let g = filled(&p, |k| if k % 2 == 0 { 0.5 + k as f64 * 1e-3 } else { -0.3 });
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        for ((_, a), ((_, b), (_, gi))) in p.named().into_iter().zip(p0.named().into_iter().zip(g.named())) {
            for ((x, y), gg) in a.data().iter().zip(b.data()).zip(gi.data()) {
                let want = -cfg.lr * gg.signum();
                // eps / |g| <= 1e-7 here; the rest is rounding of x - y
                assert!(((x - y) - want).abs() < 1e-7 * cfg.lr + 1e-15);
            }
        }
    }

    #[test]
    fn clipping_halves_gradient() {
        let (p0, mut cfg) = setup();
        cfg.weight_decay = 0.0;
        let g = filled(&p0, |k| (k as f64).sin());
        let n = global_norm(&g);
        cfg.grad_clip = n / 2.0;
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let mut sa = AdamState::new(&p0);
        let mut sb = AdamState::new(&p0);
        let stats = adam_step(&mut a, &g, &mut sa, &cfg).unwrap();
        assert!((stats.clip_scale - 0.5).abs() < 1e-15);
        assert!((stats.grad_norm - n).abs() < 1e-12);
        // the halved gradient, unclipped, gives identical moments
        let half = g.map(|_, t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * 0.5).collect()).unwrap());
        cfg.grad_clip = f64::INFINITY;
        adam_step(&mut b, &half, &mut sb, &cfg).unwrap();
        assert_eq!(sa.m, sb.m);
        assert_eq!(a, b);
    }

    #[test]
    fn decay_skips_exempt_parameters() {
        let (p0, mut cfg) = setup();
        cfg.weight_decay = 0.5;
        let mut p = p0.clone();
        let g = filled(&p, |_| 0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p.blocks[0].ln1_gain, p0.blocks[0].ln1_gain);
        let (a, b) = (p.blocks[0].w_q.data()[0], p0.blocks[0].w_q.data()[0]);
        assert!((a - b * (1.0 - cfg.lr * 0.5)).abs() < 1e-15);
    }
}
