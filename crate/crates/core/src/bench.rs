//! Forward-only attention timings against sequence length.
//!
//! Each measurement runs one multi-head attention forward pass on the raw
//! kernels (no tape) on the calling thread. Warm-up repetitions are
//! discarded; the rest give the mean, median and standard deviation.
//!
//! CSV columns, in order:
//! `mechanism,seq_len,reps,mean_ms,median_ms,std_ms,peak_state_bytes,d_model,n_heads,precision`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::model::{linattn_elu, softmax_attention};
use crate::real::{Precision, Real};
use crate::rng::SeededRng;
use crate::zeros::{zeros_forward_with, DeviationLogitParams, HeadInputs, RopeTable, ScanState, ZerosKernel};

pub const MIN_WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;
pub const CSV_HEADER: &str =
    "mechanism,seq_len,reps,mean_ms,median_ms,std_ms,peak_state_bytes,d_model,n_heads,precision";

/// Attention variants the benchmark knows how to time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMechanism {
    /// Zero-sum attention, linear-time scan.
    Zeros,
    /// Zero-sum attention with materialized weights.
    ZerosNaive,
    Softmax,
    /// `1 + elu` linear attention as a running sum.
    Linattn,
}

impl BenchMechanism {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "zeros" => Ok(Self::Zeros),
            "zeros_naive" => Ok(Self::ZerosNaive),
            "softmax" => Ok(Self::Softmax),
            "linattn" | "linattn_elu" => Ok(Self::Linattn),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?}; known: zeros, zeros_naive, softmax, linattn"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zeros => "zeros",
            Self::ZerosNaive => "zeros_naive",
            Self::Softmax => "softmax",
            Self::Linattn => "linattn",
        }
    }

    /// Bytes of the largest per-head buffer that grows with the sequence
    /// (quadratic mechanisms) or of the recurrent state (linear ones).
    pub fn state_bytes<T: Real>(self, n: usize, h: usize) -> usize {
        let scalar = std::mem::size_of::<T>();
        match self {
            Self::Zeros => ScanState::<T>::bytes_for(h),
            // radial and angular factors are both materialized
            Self::ZerosNaive => 2 * n * n * scalar,
            Self::Softmax => n * n * scalar,
            Self::Linattn => (h * h + h) * scalar,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub mechanisms: Vec<BenchMechanism>,
    pub seq_lens: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS || self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "bench needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}, got {} and {}",
                self.reps, self.warmup
            )));
        }
        if self.n_heads == 0
            || !self.d_model.is_multiple_of(self.n_heads)
            || !(self.d_model / self.n_heads).is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_lens.contains(&0) || self.mechanisms.is_empty() {
            return Err(Error::Config("bench needs mechanisms and positive seq_lens".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mechanism: BenchMechanism,
    pub seq_len: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Population standard deviation over the timed repetitions.
    pub std_ms: f64,
    pub peak_state_bytes: usize,
    pub reps: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub precision: Precision,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{},{}",
            self.mechanism.as_str(),
            self.seq_len,
            self.reps,
            self.mean_ms,
            self.median_ms,
            self.std_ms,
            self.peak_state_bytes,
            self.d_model,
            self.n_heads,
            self.precision.as_str()
        )
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// `(mean, median, population std)`.
pub fn summarize(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    (mean, median, var.sqrt())
}

struct Inputs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    u: Vec<T>,
    gates: Vec<T>,
    params: DeviationLogitParams<T>,
}

fn forward<T: Real>(
    mech: BenchMechanism,
    heads: &[Inputs<T>],
    n: usize,
    cfg: &AttentionConfig,
    rope: &RopeTable,
) -> Result<T> {
    let h = cfg.head_dim();
    let mut acc = T::zero();
    for x in heads {
        let out = match mech {
            BenchMechanism::Zeros | BenchMechanism::ZerosNaive => {
                let kernel = if mech == BenchMechanism::Zeros {
                    ZerosKernel::Scan
                } else {
                    ZerosKernel::Naive
                };
                let inputs = HeadInputs {
                    n,
                    q: &x.q,
                    k: &x.k,
                    v: &x.v,
                    u: &x.u,
                    gate_logits: &x.gates,
                };
                zeros_forward_with(kernel, &inputs, &x.params, cfg, Some(rope))?
            }
            BenchMechanism::Softmax => softmax_attention(&x.q, &x.k, &x.v, n, h, true)?,
            BenchMechanism::Linattn => linattn_elu(&x.q, &x.k, &x.v, n, h, true)?,
        };
        // keeps the result observable
        acc += out[out.len() - 1];
    }
    Ok(acc)
}

fn bench_one<T: Real>(cfg: &BenchConfig, mech: BenchMechanism, n: usize) -> Result<BenchReport> {
    let attn = AttentionConfig::new(cfg.d_model, cfg.n_heads, Mechanism::Zeros);
    let h = attn.head_dim();
    let rope = RopeTable::new(n, h)?;
    let mut r = SeededRng::stream(cfg.seed, n as u64);
    let heads: Vec<Inputs<T>> = (0..cfg.n_heads)
        .map(|_| Inputs {
            q: r.normal_vec(n * h, 1.0),
            k: r.normal_vec(n * h, 1.0),
            v: r.normal_vec(n * h, 1.0),
            u: r.normal_vec(n * h, 1.0),
            gates: r.normal_vec(n * 3, 1.0),
            params: DeviationLogitParams {
                mu: r.normal_vec(h, 0.5),
                tau: T::zero(),
            },
        })
        .collect();
    let mut times = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.warmup + cfg.reps {
        let start = Instant::now();
        let sink = forward(mech, &heads, n, &attn, &rope)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(sink);
        if rep >= cfg.warmup {
            times.push(ms);
        }
    }
    let (mean_ms, median_ms, std_ms) = summarize(&times);
    Ok(BenchReport {
        mechanism: mech,
        seq_len: n,
        mean_ms,
        median_ms,
        std_ms,
        peak_state_bytes: mech.state_bytes::<T>(n, h),
        reps: cfg.reps,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        precision: cfg.precision,
    })
}

/// Times every mechanism at every length, in that nesting order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &mech in &cfg.mechanisms {
        for &n in &cfg.seq_lens {
            out.push(match cfg.precision {
                Precision::Double => bench_one::<f64>(cfg, mech, n)?,
                Precision::Single => bench_one::<f32>(cfg, mech, n)?,
            });
        }
    }
    Ok(out)
}

/// Median-time ratio between two lengths of one mechanism.
pub fn time_ratio(reports: &[BenchReport], mech: BenchMechanism, long: usize, short: usize) -> Option<f64> {
    let at = |n| {
        reports
            .iter()
            .find(|r| r.mechanism == mech && r.seq_len == n)
            .map(|r| r.median_ms)
    };
    Some(at(long)? / at(short)?)
}
