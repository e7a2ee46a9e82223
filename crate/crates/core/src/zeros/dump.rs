//! Row-major CSV dump of a materialized weight matrix, for inspection.

use std::fmt::Write as _;
use std::path::Path;

use super::head::{prepare_head, HeadInputs};
use super::kernels::naive_weights;
use super::logits::DeviationLogitParams;
use crate::config::AttentionConfig;
use crate::error::{Error, Result};

/// Formats an `n x n` matrix as CSV, one row per line.
pub fn weights_csv(w: &[f64], n: usize) -> Result<String> {
    if w.len() != n * n {
        return Err(Error::dim(format!("{} values is not {n} x {n}", w.len())));
    }
    let mut out = String::with_capacity(w.len() * 12);
    for row in w.chunks(n.max(1)) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:e}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Materializes the weight matrix of one head and writes it to `path`.
pub fn dump_naive_weights(
    path: &Path,
    x: &HeadInputs<'_, f64>,
    params: &DeviationLogitParams<f64>,
    cfg: &AttentionConfig,
) -> Result<()> {
    let prep = prepare_head(x, params, cfg, None)?;
    let w = naive_weights(&prep.view(x.v), cfg.causal, cfg.sqrt_decay)?;
    let csv = weights_csv(&w, x.n)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips() {
        let w = [0.5, -0.25, 1e-20, 3.0];
        let csv = weights_csv(&w, 2).unwrap();
        let back: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(back, w);
        assert!(weights_csv(&w, 3).is_err());
    }
}
