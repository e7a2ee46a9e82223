//! Deterministic synthetic tasks and their metric.
//!
//! Every generator is a pure function of its config and seed. Batches are
//! stored flat: sequence `b`, position `p` lives at `b * seq_len + p`, the
//! same row order the model uses for stacked sequences.

mod copy;
mod memorize;
mod mqar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use copy::{gen_selective_copy, SelectiveCopyConfig, DELIMITER, NOISE};
pub use memorize::{gen_memorize, gen_memorize_with, memorize_mapping, MemorizeConfig};
pub use mqar::{gen_mqar, MqarConfig, FILLER};

/// Token sequences with per-position labels and loss masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    /// Meaningful only where `mask` is set; zero elsewhere.
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    tokens: &'a [usize],
    labels: &'a [usize],
    mask: &'a [bool],
}

impl TaskBatch {
    pub(crate) fn empty(batch: usize, seq_len: usize) -> Self {
        let n = batch * seq_len;
        Self {
            batch,
            seq_len,
            tokens: vec![0; n],
            labels: vec![0; n],
            mask: vec![false; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// `(tokens, labels, mask)` of sequence `b`.
    pub fn sequence(&self, b: usize) -> (&[usize], &[usize], &[bool]) {
        let r = b * self.seq_len..(b + 1) * self.seq_len;
        (&self.tokens[r.clone()], &self.labels[r.clone()], &self.mask[r])
    }

    /// One JSON object per sequence with keys `tokens`, `labels`, `mask`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for b in 0..self.batch {
            let (tokens, labels, mask) = self.sequence(b);
            let row = JsonRow { tokens, labels, mask };
            out.push_str(&serde_json::to_string(&row).expect("plain vectors serialize"));
            out.push('\n');
        }
        out
    }
}

/// Fraction of masked positions whose argmax logit equals the label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub value: f64,
    pub correct: usize,
    pub total: usize,
    /// Set when no position was masked; `value` is then 1.0 by convention.
    pub empty_mask: bool,
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn masked_accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<Accuracy> {
    let (rows, _) = logits.dims2()?;
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "masked_accuracy: {rows} logit rows, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let (mut correct, mut total) = (0, 0);
    for r in (0..rows).filter(|&r| mask[r]) {
        total += 1;
        if argmax(logits.row(r)) == labels[r] {
            correct += 1;
        }
    }
    Ok(Accuracy {
        value: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        empty_mask: total == 0,
    })
}

/// Task selection for training runs, tagged by `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskConfig {
    Mqar(MqarConfig),
    SelectiveCopy(SelectiveCopyConfig),
    Memorize(MemorizeConfig),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Mqar(_) => "mqar",
            TaskConfig::SelectiveCopy(_) => "selective_copy",
            TaskConfig::Memorize(_) => "memorize",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TaskConfig::Mqar(c) => c.vocab_size,
            TaskConfig::SelectiveCopy(c) => c.vocab_size,
            TaskConfig::Memorize(c) => c.vocab_size,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskConfig::Mqar(c) => c.seq_len,
            TaskConfig::SelectiveCopy(c) => c.seq_len,
            TaskConfig::Memorize(c) => c.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Mqar(c) => c.validate(),
            TaskConfig::SelectiveCopy(c) => c.validate(),
            TaskConfig::Memorize(c) => c.validate(),
        }
    }

    /// `batch` sequences drawn with `seed` in place of the config's own.
    pub fn generate(&self, batch: usize, seed: u64) -> Result<TaskBatch> {
        match self {
            TaskConfig::Mqar(c) => gen_mqar(&MqarConfig { seed, ..c.clone() }, batch),
            TaskConfig::SelectiveCopy(c) => gen_selective_copy(&SelectiveCopyConfig { seed, ..c.clone() }, batch),
            TaskConfig::Memorize(c) => gen_memorize(&MemorizeConfig { seed, ..c.clone() }, batch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(rows: &[usize], v: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![rows.len(), v]);
        for (r, &c) in rows.iter().enumerate() {
            t.data_mut()[r * v + c] = 1.0;
        }
        t
    }

    #[test]
    fn accuracy_cases() {
        let logits = one_hot(&[1, 2], 4);
        let all = masked_accuracy(&logits, &[1, 2], &[true, true]).unwrap();
        assert_eq!(all.value, 1.0);
        let half = masked_accuracy(&logits, &[1, 3], &[true, true]).unwrap();
        assert_eq!(half.value, 0.5);
        let none = masked_accuracy(&logits, &[0, 0], &[false, false]).unwrap();
        assert!(none.empty_mask && none.value == 1.0);
        assert!(masked_accuracy(&logits, &[0], &[true]).is_err());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0]), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let b = gen_mqar(&MqarConfig::new(16, 2, 8, 2, 3), 2).unwrap();
        let text = b.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["tokens"].as_array().unwrap().len(), 8);
        assert_eq!(v["mask"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn task_config_toml() {
        let c: TaskConfig =
            toml::from_str("name = \"mqar\"\nvocab_size = 64\nn_kv_pairs = 8\nseq_len = 64\nn_queries = 8\n").unwrap();
        assert_eq!(c.name(), "mqar");
        assert_eq!(c.vocab_size(), 64);
        assert!(c.validate().is_ok());
    }
}
