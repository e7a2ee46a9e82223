//! Selective copy at desk scale.
//!
//! Vocabulary partition: `0` is noise, `1` the delimiter, content tokens
//! come from `2..V`. Content tokens are scattered among noise in the first
//! `seq_len - n_copy` positions, followed by the delimiter. From the
//! delimiter on, each position is labeled with the next content token and
//! holds the previous one as input (teacher forcing).

use serde::{Deserialize, Serialize};

use super::TaskBatch;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const NOISE: usize = 0;
pub const DELIMITER: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveCopyConfig {
    pub vocab_size: usize,
    pub n_tokens_to_copy: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SelectiveCopyConfig {
    pub fn new(vocab_size: usize, n_tokens_to_copy: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            n_tokens_to_copy,
            seq_len,
            seed,
        }
    }

    /// Positions before the delimiter.
    pub fn input_len(&self) -> usize {
        self.seq_len - self.n_tokens_to_copy
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("selective_copy: vocab_size must be >= 3".into()));
        }
        if self.n_tokens_to_copy == 0 || 2 * self.n_tokens_to_copy > self.seq_len {
            return Err(Error::Config(format!(
                "selective_copy: need 1 <= n_tokens_to_copy <= seq_len / 2, got {} of {}",
                self.n_tokens_to_copy, self.seq_len
            )));
        }
        Ok(())
    }
}

/// `batch` sequences; sequence `b` draws from stream `b` of `cfg.seed`.
pub fn gen_selective_copy(cfg: &SelectiveCopyConfig, batch: usize) -> Result<TaskBatch> {
    cfg.validate()?;
    let (n, m) = (cfg.seq_len, cfg.n_tokens_to_copy);
    let delim = cfg.input_len();
    let mut out = TaskBatch::empty(batch, n);
    for b in 0..batch {
        let mut rng = SeededRng::stream(cfg.seed, b as u64);
        let content: Vec<usize> = (0..m).map(|_| 2 + rng.below(cfg.vocab_size - 2)).collect();
        let mut slots: Vec<usize> = (0..delim).collect();
        rng.shuffle(&mut slots);
        let mut slots = slots[..m].to_vec();
        slots.sort_unstable();
        let seq = b * n..(b + 1) * n;
        let tokens = &mut out.tokens[seq.clone()];
        let labels = &mut out.labels[seq.clone()];
        let mask = &mut out.mask[seq];
        for (&p, &c) in slots.iter().zip(&content) {
            tokens[p] = c;
        }
        tokens[delim] = DELIMITER;
        for (j, &c) in content.iter().enumerate() {
            let p = delim + j;
            labels[p] = c;
            mask[p] = true;
            if j > 0 {
                tokens[p] = content[j - 1];
            }
        }
    }
    Ok(out)
}
