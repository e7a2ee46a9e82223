//! Invariant suite behind the `verify` command and the acceptance tests.
//!
//! Every check measures one quantity and compares it with a tolerance.
//! Kernel checks run in the requested precision. Checks that go through
//! the autodiff tape, the linear-algebra helpers or the model are double
//! precision only and report so in the table.
//!
//! Single-precision tolerances:
//!
//! | check                 | double        | single      |
//! |-----------------------|---------------|-------------|
//! | softmax row sums      | 1e-12         | 1e-5        |
//! | residual identity     | 1e-12         | 1e-5        |
//! | zero sum, per step    | 1e-12         | 1e-6        |
//! | scan vs naive         | 1e-8          | 1e-3        |
//! | three scans vs fused  | 1e-8          | 1e-3        |
//! | rotary shift          | 1e-10         | 1e-4        |
//! | zero-sum softmax rows | 1e-10         | 1e-5        |
//!
//! Inequality checks (stability bounds, decay trend) keep their limits.

pub mod checks;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::real::Precision;
use crate::zeros::{Residual, ZerosKernel};

/// Deliberate defects for exercising the verifier itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the higher-order corrections, leaving the raw softmax in
    /// place of the residual.
    SkipEps,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skip_eps" => Ok(Fault::SkipEps),
            other => Err(Error::Config(format!("unknown fault {other:?}; known: skip_eps"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fault::SkipEps => "skip_eps",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub precision: Precision,
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    /// Precision the check actually ran in.
    pub precision: Precision,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Error message when the check could not run.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Fixed-width table, one line per check.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<28} {:<9} {:>12} {:>12}  status",
            "module", "check", "precision", "measured", "tolerance"
        );
        for c in &self.checks {
            let status = match (&c.error, c.passed) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "pass".into(),
                (None, false) => "FAIL".into(),
            };
            let _ = writeln!(
                out,
                "{:<8} {:<28} {:<9} {:>12.3e} {:>12.3e}  {status}",
                c.module,
                c.name,
                c.precision.as_str(),
                c.measured,
                c.tolerance
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(out, "{} checks, {failed} failed", self.checks.len());
        out
    }
}

struct Suite {
    opts: VerifyOptions,
    checks: Vec<CheckResult>,
}

impl Suite {
    /// Records `measured <= tolerance`; a NaN measurement fails.
    fn at_most(
        &mut self,
        module: &'static str,
        name: &'static str,
        precision: Precision,
        measured: Result<f64>,
        tolerance: f64,
    ) {
        let (measured, error) = match measured {
            Ok(m) => (m, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        self.checks.push(CheckResult {
            module,
            name,
            precision,
            measured,
            tolerance,
            passed: error.is_none() && measured <= tolerance,
            error,
        });
    }

    fn holds(&mut self, module: &'static str, name: &'static str, ok: Result<bool>) {
        self.at_most(
            module,
            name,
            Precision::Double,
            ok.map(|b| if b { 0.0 } else { 1.0 }),
            0.0,
        );
    }

    /// Tolerance for the selected precision.
    fn tol(&self, double: f64, single: f64) -> f64 {
        match self.opts.precision {
            Precision::Double => double,
            Precision::Single => single,
        }
    }
}

/// Kernel checks generic over the scalar type.
fn kernel_checks<T: crate::real::Real>(s: &mut Suite) {
    let (seed, p) = (s.opts.seed, s.opts.precision);
    let residual = match s.opts.fault {
        Some(Fault::SkipEps) => Residual::SkipCorrections,
        None => Residual::Exact,
    };
    let tol = s.tol(1e-12, 1e-5);
    s.at_most(
        "tensor",
        "softmax_row_sum",
        p,
        Ok(checks::softmax_row_sum_error::<T>(seed, 200)),
        tol,
    );
    let tol = s.tol(1e-12, 1e-5);
    s.at_most(
        "zeros",
        "residual_identity",
        p,
        checks::residual_identity_error::<T>(seed, 1000, 1024),
        tol,
    );
    let tol = s.tol(1e-12, 1e-6);
    s.at_most(
        "zeros",
        "zero_sum",
        p,
        checks::zero_sum_error::<T>(seed, 1000, 1024, residual),
        tol,
    );
    let tol = s.tol(1e-8, 1e-3);
    let scan = checks::kernel_max_diff::<T>(ZerosKernel::Scan, ZerosKernel::Naive, 20);
    s.at_most("zeros", "scan_vs_naive", p, scan, tol);
    let three = checks::kernel_max_diff::<T>(ZerosKernel::ThreeScan, ZerosKernel::Scan, 20);
    s.at_most("zeros", "three_scans_vs_fused", p, three, tol);
    match checks::stability::<T>(seed, 5.0, &[16, 256, 4096, 8192]) {
        Ok(r) => {
            s.at_most("zeros", "stability_weight_bound", p, Ok(r.weight_ratio()), 1.0);
            s.at_most("zeros", "stability_output_bound", p, Ok(r.output_bound_ratio()), 1.0);
            s.at_most("zeros", "stability_output_drift", p, Ok(r.output_drift()), 3.0);
        }
        Err(e) => s.at_most("zeros", "stability_weight_bound", p, Err(e), 1.0),
    }
    let tol = s.tol(1e-10, 1e-4);
    s.at_most("zeros", "rope_shift", p, checks::rope_shift_error::<T>(seed, 200), tol);
    let tol = s.tol(1e-10, 1e-5);
    match checks::zeros_sm_report::<T>(seed, 20) {
        Ok(r) => {
            s.at_most("zeros", "zeros_sm_saturated", p, Ok(r.saturated), tol);
            s.at_most("zeros", "zeros_sm_row_sum", p, Ok(r.row_sum), tol);
            s.at_most("zeros", "zeros_sm_first_row", p, Ok(r.first_row), 0.0);
        }
        Err(e) => s.at_most("zeros", "zeros_sm_saturated", p, Err(e), tol),
    }
}

/// Runs every check; never stops early.
pub fn run_verify(opts: VerifyOptions) -> VerifyReport {
    let mut s = Suite {
        opts,
        checks: Vec::new(),
    };
    let seed = opts.seed;
    let d = Precision::Double;
    s.at_most("tensor", "tape_gradient", d, checks::tape_gradient_error(seed), 1e-5);
    s.at_most("tensor", "cumsum_total", d, checks::cumsum_total_error(seed), 1e-12);
    s.holds("tensor", "tape_deterministic", checks::tape_is_deterministic(seed));
    match opts.precision {
        Precision::Double => kernel_checks::<f64>(&mut s),
        Precision::Single => kernel_checks::<f32>(&mut s),
    }
    let decay = checks::decay_sensitivity(seed, &[64, 256, 1024], 4).map(|r| {
        let steps: Vec<f64> = r.windows(2).map(|w| w[1] / w[0]).collect();
        steps.into_iter().fold(0.0, f64::max)
    });
    s.at_most("zeros", "decay_trend", d, decay, 0.7);
    match checks::span_violations(seed, 64, 500) {
        Ok((accepted, rejected)) => {
            s.at_most("zeros", "span_difference_rejected", d, Ok(accepted as f64), 0.0);
            s.at_most("zeros", "span_softmax_accepted", d, Ok(rejected as f64), 0.0);
        }
        Err(e) => s.at_most("zeros", "span_difference_rejected", d, Err(e), 0.0),
    }
    s.at_most("zeros", "affine_hull", d, checks::affine_hull_error(seed, 100), 1e-9);
    s.at_most("zeros", "zeros_gradient", d, checks::zeros_gradient_error(seed), 1e-5);
    match checks::recovered_weights(seed) {
        Ok(w) => {
            s.at_most("model", "zeros_delta_zero_sum", d, Ok(w.zeros_row_sum), 1e-10);
            s.at_most("model", "softmax_nonnegative", d, Ok(-w.softmax_min), 0.0);
            s.at_most("model", "softmax_row_sum", d, Ok(w.softmax_row_sum), 1e-12);
        }
        Err(e) => s.at_most("model", "zeros_delta_zero_sum", d, Err(e), 1e-10),
    }
    s.holds("model", "mechanism_shapes", checks::mechanisms_share_shapes(seed));
    s.at_most(
        "model",
        "model_gradient",
        d,
        checks::model_gradient_error(seed).map(|r| r.0),
        1e-4,
    );
    s.holds("tasks", "generator_determinism", checks::tasks_are_deterministic(seed));
    s.at_most(
        "tasks",
        "mqar_reachable",
        d,
        checks::mqar_unreachable(seed).map(|n| n as f64),
        0.0,
    );
    VerifyReport {
        options: opts,
        checks: s.checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_names() {
        assert_eq!(Fault::parse("skip_eps").unwrap(), Fault::SkipEps);
        assert_eq!(Fault::SkipEps.as_str(), "skip_eps");
        assert!(Fault::parse("nope").is_err());
    }

    #[test]
    fn table_lists_every_check() {
        let mut s = Suite {
            opts: VerifyOptions::default(),
            checks: Vec::new(),
        };
        s.at_most("zeros", "a", Precision::Double, Ok(0.5), 1.0);
        s.at_most("zeros", "b", Precision::Double, Ok(f64::NAN), 1.0);
        s.at_most("zeros", "c", Precision::Double, Err(Error::Config("x".into())), 1.0);
        let r = VerifyReport {
            options: s.opts,
            checks: s.checks,
        };
        assert!(!r.passed());
        assert_eq!(r.failures().count(), 2);
        let t = r.table();
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("ERROR"));
    }
}
