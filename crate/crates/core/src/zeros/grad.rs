//! Reverse pass of the scan and encoder kernels.
//!
//! The forward recurrence is replayed with a single global shift `M = max s`
//! (shift-invariant: `alpha F` does not depend on it). Per step we record the
//! scalar adjoints of the coefficients, then one reverse sweep accumulates
//! the suffix sums of the state adjoints `dF`, `dG`, `dH`, `dE`, `dP` and
//! distributes them onto each key, value and logit.

use super::kernels::{dense_coeffs, prefer_dense, visible, HeadView};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout};

/// Gradients with respect to the prepared head inputs.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub gh: Vec<f64>,
}

impl HeadGrads {
    fn zeros(n: usize, h: usize) -> Self {
        Self {
            q: vec![0.0; n * h],
            k: vec![0.0; n * h],
            v: vec![0.0; n * h],
            s: vec![0.0; n],
            g0: vec![0.0; n],
            g1: vec![0.0; n],
            gh: vec![0.0; n],
        }
    }
}

/// Per-query adjoint scalars.
#[derive(Clone, Copy, Default)]
struct StepAdjoint {
    /// Coefficients (with decay) that multiply `q^T do` into `dF`, `dG`, `dH`.
    cf: f64,
    cg: f64,
    ch: f64,
    d_e: f64,
    d_p: f64,
}

struct Coeffs {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

fn coeffs(x: &HeadView<'_, f64>, t: usize, count: usize, e: f64, p: f64) -> Coeffs {
    let c = count as f64;
    let pt2 = p / (c * c);
    Coeffs {
        alpha: x.gh[t] / e,
        beta: (x.g1[t] - x.gh[t]) / c,
        gamma: (pt2 - 1.0 / c) * x.gh[t] - pt2 * x.g1[t] + x.g0[t] / c,
    }
}

/// Adjoints of one query row given the state it read.
#[allow(clippy::too_many_arguments)]
fn query_step(
    x: &HeadView<'_, f64>,
    t: usize,
    count: usize,
    lam: f64,
    e: f64,
    p: f64,
    states: [&[f64]; 3],
    d_out: &[f64],
    grads: &mut HeadGrads,
) -> StepAdjoint {
    let h = x.h;
    let c = coeffs(x, t, count, e, p);
    let qt = &x.q[t * h..(t + 1) * h];
    let dt = &d_out[t * h..(t + 1) * h];
    let [f, g, hh] = states;
    let (mut da, mut db, mut dc) = (0.0, 0.0, 0.0);
    let dq = &mut grads.q[t * h..(t + 1) * h];
    for a in 0..h {
        let row = a * h..(a + 1) * h;
        let (fa, ga, ha) = (&f[row.clone()], &g[row.clone()], &hh[row]);
        let (mut pf, mut pg, mut ph) = (0.0, 0.0, 0.0);
        for j in 0..h {
            pf += fa[j] * dt[j];
            pg += ga[j] * dt[j];
            ph += ha[j] * dt[j];
        }
        da += qt[a] * pf;
        db += qt[a] * pg;
        dc += qt[a] * ph;
        dq[a] += lam * (c.alpha * pf + c.beta * pg + c.gamma * ph);
    }
    let (da, db, dc) = (lam * da, lam * db, lam * dc);
    let cnt = count as f64;
    let (gh, g1) = (x.gh[t], x.g1[t]);
    grads.gh[t] += da / e - db / cnt + dc * (p / (cnt * cnt) - 1.0 / cnt);
    grads.g1[t] += db / cnt - dc * p / (cnt * cnt);
    grads.g0[t] += dc / cnt;
    StepAdjoint {
        cf: lam * c.alpha,
        cg: lam * c.beta,
        ch: lam * c.gamma,
        d_e: -da * gh / (e * e),
        d_p: dc * (gh - g1) / (cnt * cnt),
    }
}

fn add_outer(m: &mut [f64], scale: f64, a: &[f64], b: &[f64]) {
    if scale == 0.0 {
        return;
    }
    let h = b.len();
    for (i, &ai) in a.iter().enumerate() {
        let s = scale * ai;
        for (mj, &bj) in m[i * h..(i + 1) * h].iter_mut().zip(b) {
            *mj += s * bj;
        }
    }
}

/// Scatter the suffix adjoints onto key/value/logit `i`.
#[allow(clippy::too_many_arguments)]
fn key_step(
    x: &HeadView<'_, f64>,
    i: usize,
    et: f64,
    rf: &[f64],
    rg: &[f64],
    rh: &[f64],
    r_e: f64,
    r_p: f64,
    grads: &mut HeadGrads,
) {
    let h = x.h;
    let si = x.s[i];
    let ki = &x.k[i * h..(i + 1) * h];
    let vi = &x.v[i * h..(i + 1) * h];
    let (mut kfv, mut kgv) = (0.0, 0.0);
    for a in 0..h {
        let mut mv = 0.0;
        let (mut fv, mut gv) = (0.0, 0.0);
        for j in 0..h {
            let idx = a * h + j;
            let m = et * rf[idx] + si * rg[idx] + rh[idx];
            mv += m * vi[j];
            fv += rf[idx] * vi[j];
            gv += rg[idx] * vi[j];
            grads.v[i * h + j] += ki[a] * m;
        }
        grads.k[i * h + a] += mv;
        kfv += ki[a] * fv;
        kgv += ki[a] * gv;
    }
    grads.s[i] += et * kfv + kgv + et * r_e + r_p;
}

/// Gradients of [`super::kernels::scan_core`] (causal) or
/// [`super::kernels::encoder_core`] for upstream `d_out`.
pub fn head_backward(x: &HeadView<'_, f64>, causal: bool, sqrt_decay: bool, d_out: &[f64]) -> Result<HeadGrads> {
    x.check()?;
    let (n, h) = (x.n, x.h);
    let mut grads = HeadGrads::zeros(n, h);
    if n == 0 {
        return Ok(grads);
    }
    let shift = x.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let et: Vec<f64> = x.s.iter().map(|&s| (s - shift).exp()).collect();
    let hh = h * h;
    let (mut f, mut g, mut hm) = (vec![0.0; hh], vec![0.0; hh], vec![0.0; hh]);
    let (mut e, mut p) = (0.0, 0.0);
    let absorb = |i: usize, f: &mut [f64], g: &mut [f64], hm: &mut [f64]| {
        let (ki, vi) = (&x.k[i * h..(i + 1) * h], &x.v[i * h..(i + 1) * h]);
        add_outer(f, et[i], ki, vi);
        add_outer(g, x.s[i], ki, vi);
        add_outer(hm, 1.0, ki, vi);
    };
    let decay = |c: usize| if sqrt_decay { 1.0 / (c as f64).sqrt() } else { 1.0 };

    let (mut rf, mut rg, mut rh) = (vec![0.0; hh], vec![0.0; hh], vec![0.0; hh]);
    if causal {
        let mut adj = Vec::with_capacity(n);
        for t in 0..n {
            absorb(t, &mut f, &mut g, &mut hm);
            e += et[t];
            p += x.s[t];
            let lam = decay(t + 1);
            adj.push(query_step(x, t, t + 1, lam, e, p, [&f, &g, &hm], d_out, &mut grads));
        }
        let (mut r_e, mut r_p) = (0.0, 0.0);
        for t in (0..n).rev() {
            let a = adj[t];
            let (qt, dt) = (&x.q[t * h..(t + 1) * h], &d_out[t * h..(t + 1) * h]);
            add_outer(&mut rf, a.cf, qt, dt);
            add_outer(&mut rg, a.cg, qt, dt);
            add_outer(&mut rh, a.ch, qt, dt);
            r_e += a.d_e;
            r_p += a.d_p;
            key_step(x, t, et[t], &rf, &rg, &rh, r_e, r_p, &mut grads);
        }
    } else {
        for t in 0..n {
            absorb(t, &mut f, &mut g, &mut hm);
            e += et[t];
            p += x.s[t];
        }
        let lam = decay(n);
        let (mut r_e, mut r_p) = (0.0, 0.0);
        for t in 0..n {
            let a = query_step(x, t, n, lam, e, p, [&f, &g, &hm], d_out, &mut grads);
            let (qt, dt) = (&x.q[t * h..(t + 1) * h], &d_out[t * h..(t + 1) * h]);
            add_outer(&mut rf, a.cf, qt, dt);
            add_outer(&mut rg, a.cg, qt, dt);
            add_outer(&mut rh, a.ch, qt, dt);
            r_e += a.d_e;
            r_p += a.d_p;
        }
        for i in 0..n {
            key_step(x, i, et[i], &rf, &rg, &rh, r_e, r_p, &mut grads);
        }
    }
    Ok(grads)
}

/// Gradients of [`super::kernels::dense_core`]: the same function as the
/// scan, differentiated through its `n x n` materialization.
pub fn head_backward_dense(x: &HeadView<'_, f64>, causal: bool, sqrt_decay: bool, d_out: &[f64]) -> Result<HeadGrads> {
    x.check()?;
    let (n, h) = (x.n, x.h);
    if d_out.len() != n * h {
        return Err(Error::dim("zeros backward: upstream gradient shape"));
    }
    let mut grads = HeadGrads::zeros(n, h);
    if n == 0 {
        return Ok(grads);
    }
    let c = dense_coeffs(x, causal, sqrt_decay);
    let mut cos = vec![0.0; n * n];
    gemm(n, h, n, 1.0, x.q, Layout::N, x.k, Layout::T, 0.0, &mut cos);
    let mut dw = vec![0.0; n * n];
    gemm(n, h, n, 1.0, d_out, Layout::N, x.v, Layout::T, 0.0, &mut dw);
    // w and d(cos) overwrite cos and dw in place
    let (mut col_a, mut col_b) = (vec![0.0; n], vec![0.0; n]);
    let (mut d_e, mut d_p) = (vec![0.0; n], vec![0.0; n]);
    for t in 0..n {
        let len = visible(causal, n, t);
        let (lam, alpha, beta, gamma) = (c.lam[t], c.alpha[t], c.beta[t], c.gamma[t]);
        let (mut a, mut b, mut cc) = (0.0, 0.0, 0.0);
        let row = t * n..(t + 1) * n;
        let (cr, dr) = (&mut cos[row.clone()], &mut dw[row]);
        for i in 0..len {
            let r = alpha * c.es[i] + beta * x.s[i] + gamma;
            let d_r = lam * dr[i] * cr[i];
            a += d_r * c.es[i];
            b += d_r * x.s[i];
            cc += d_r;
            col_a[i] += d_r * alpha;
            col_b[i] += d_r * beta;
            dr[i] *= lam * r;
            cr[i] *= lam * r;
        }
        cr[len..].fill(0.0);
        dr[len..].fill(0.0);
        let lf = len as f64;
        let pt2 = c.p[t] / (lf * lf);
        let (gh, g1) = (x.gh[t], x.g1[t]);
        grads.gh[t] = a / c.e[t] - b / lf + cc * (pt2 - 1.0 / lf);
        grads.g1[t] = b / lf - cc * pt2;
        grads.g0[t] = cc / lf;
        d_e[t] = -a * gh / (c.e[t] * c.e[t]);
        d_p[t] = cc * (gh - g1) / (lf * lf);
    }
    let (w, dcos) = (cos, dw);
    gemm(n, n, h, 1.0, &w, Layout::T, d_out, Layout::N, 0.0, &mut grads.v);
    gemm(n, n, h, 1.0, &dcos, Layout::N, x.k, Layout::N, 0.0, &mut grads.q);
    gemm(n, n, h, 1.0, &dcos, Layout::T, x.q, Layout::N, 0.0, &mut grads.k);
    // E_t and P_t sum over the keys each query sees
    let (mut se, mut sp) = (0.0, 0.0);
    if !causal {
        se = d_e.iter().sum();
        sp = d_p.iter().sum();
    }
    for i in (0..n).rev() {
        if causal {
            se += d_e[i];
            sp += d_p[i];
        }
        grads.s[i] = c.es[i] * (col_a[i] + se) + col_b[i] + sp;
    }
    Ok(grads)
}

/// Dense adjoint for short sequences, scan adjoint otherwise.
pub fn head_backward_auto(x: &HeadView<'_, f64>, causal: bool, sqrt_decay: bool, d_out: &[f64]) -> Result<HeadGrads> {
    if prefer_dense(x.n, x.h) {
        head_backward_dense(x, causal, sqrt_decay, d_out)
    } else {
        head_backward(x, causal, sqrt_decay, d_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::zeros::kernels::{encoder_core, scan_core};

    struct Raw {
        n: usize,
        h: usize,
        parts: [Vec<f64>; 7],
    }

    impl Raw {
        fn view(&self) -> HeadView<'_, f64> {
            let [q, k, v, s, g0, g1, gh] = &self.parts;
            HeadView {
                n: self.n,
                h: self.h,
                q,
                k,
                v,
                s,
                g0,
                g1,
                gh,
            }
        }

        fn loss(&self, causal: bool, decay: bool, w: &[f64]) -> f64 {
            let mut out = vec![0.0; self.n * self.h];
            if causal {
                scan_core(&self.view(), decay, &mut out).unwrap();
            } else {
                encoder_core(&self.view(), decay, &mut out).unwrap();
            }
            out.iter().zip(w).map(|(a, b)| a * b).sum()
        }
    }

    #[test]
    fn matches_central_differences() {
        let (n, h) = (6, 3);
        let mut r = SeededRng::new(17);
        let mut parts: [Vec<f64>; 7] = Default::default();
        parts[0] = r.normal_vec(n * h, 0.6);
        parts[1] = r.normal_vec(n * h, 0.6);
        parts[2] = r.normal_vec(n * h, 1.0);
        parts[3] = r.normal_vec(n, 2.0);
        for p in parts.iter_mut().skip(4) {
            *p = r.uniform_vec(n, 0.1, 0.9);
        }
        let w = r.normal_vec::<f64>(n * h, 1.0);
        let mut raw = Raw { n, h, parts };
        let modes = [(true, false), (true, true), (false, false), (false, true)];
        for ((causal, decay), dense) in modes.into_iter().flat_map(|m| [(m, false), (m, true)]) {
            let g = if dense {
                head_backward_dense(&raw.view(), causal, decay, &w).unwrap()
            } else {
                head_backward(&raw.view(), causal, decay, &w).unwrap()
            };
            let analytic = [&g.q, &g.k, &g.v, &g.s, &g.g0, &g.g1, &g.gh].map(|x| x.clone());
            for part in 0..7 {
                for i in 0..raw.parts[part].len() {
                    let x0 = raw.parts[part][i];
                    let eps = 1e-6;
                    raw.parts[part][i] = x0 + eps;
                    let lp = raw.loss(causal, decay, &w);
                    raw.parts[part][i] = x0 - eps;
                    let lm = raw.loss(causal, decay, &w);
                    raw.parts[part][i] = x0;
                    let fd = (lp - lm) / (2.0 * eps);
                    let a = analytic[part][i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        rel < 1e-6,
                        "part {part} idx {i}: {a} vs {fd} ({causal}, {decay}, {dense})"
                    );
                }
            }
        }
    }
}
