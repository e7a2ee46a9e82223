//! Memorize: labels are a fixed random bijection of the input tokens, so
//! the mapping has to live in the weights.

use serde::{Deserialize, Serialize};

use super::TaskBatch;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizeConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Fixes the token mapping across batches.
    #[serde(default)]
    pub mapping_seed: u64,
    /// Draws the input tokens.
    #[serde(default)]
    pub seed: u64,
}

impl MemorizeConfig {
    pub fn new(vocab_size: usize, seq_len: usize, mapping_seed: u64, seed: u64) -> Self {
        Self {
            vocab_size,
            seq_len,
            mapping_seed,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len == 0 {
            return Err(Error::Config("memorize: need vocab_size >= 2 and seq_len >= 1".into()));
        }
        Ok(())
    }
}

/// The permutation `token -> label` selected by `mapping_seed`.
pub fn memorize_mapping(vocab_size: usize, mapping_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    SeededRng::new(mapping_seed).shuffle(&mut perm);
    perm
}

pub fn gen_memorize(cfg: &MemorizeConfig, batch: usize) -> Result<TaskBatch> {
    cfg.validate()?;
    let mapping = memorize_mapping(cfg.vocab_size, cfg.mapping_seed);
    gen_memorize_with(&mapping, cfg.seq_len, batch, cfg.seed)
}

/// Memorize batches under an explicit `mapping` (any permutation, the
/// identity included).
pub fn gen_memorize_with(mapping: &[usize], seq_len: usize, batch: usize, seed: u64) -> Result<TaskBatch> {
    let v = mapping.len();
    let mut seen = vec![false; v];
    for &m in mapping {
        if m >= v || std::mem::replace(&mut seen[m], true) {
            return Err(Error::Config("memorize: mapping is not a permutation".into()));
        }
    }
    let mut out = TaskBatch::empty(batch, seq_len);
    for b in 0..batch {
        let mut rng = SeededRng::stream(seed, b as u64);
        for p in b * seq_len..(b + 1) * seq_len {
            let t = rng.below(v);
            out.tokens[p] = t;
            out.labels[p] = mapping[t];
        }
    }
    out.mask.fill(true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::masked_accuracy;
    use crate::tensor::Tensor;

    #[test]
    fn identity_copy_through_is_perfect() {
        let id: Vec<usize> = (0..7).collect();
        let b = gen_memorize_with(&id, 12, 3, 4).unwrap();
        let mut logits = Tensor::zeros(vec![b.rows(), 7]);
        for (r, &t) in b.tokens.iter().enumerate() {
            logits.data_mut()[r * 7 + t] = 1.0;
        }
        assert_eq!(masked_accuracy(&logits, &b.labels, &b.mask).unwrap().value, 1.0);
    }

    #[test]
    fn bijection_preserves_histogram() {
        let cfg = MemorizeConfig::new(9, 50, 3, 1);
        let b = gen_memorize(&cfg, 4).unwrap();
        let map = memorize_mapping(9, 3);
        let mut tok = vec![0; 9];
        let mut lab = vec![0; 9];
        for (&t, &l) in b.tokens.iter().zip(&b.labels) {
            tok[map[t]] += 1;
            lab[l] += 1;
        }
        assert_eq!(tok, lab);
        let mut sorted = map.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn mapping_fixed_across_batches() {
        let a = gen_memorize(&MemorizeConfig::new(9, 20, 3, 1), 2).unwrap();
        let b = gen_memorize(&MemorizeConfig::new(9, 20, 3, 2), 2).unwrap();
        let map = memorize_mapping(9, 3);
        for x in [a, b] {
            assert!(x.tokens.iter().zip(&x.labels).all(|(&t, &l)| map[t] == l));
        }
        assert!(gen_memorize_with(&[0, 0], 4, 1, 0).is_err());
    }
}
