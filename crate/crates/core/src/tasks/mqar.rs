//! Multi-query associative recall.
//!
//! Vocabulary partition: `0` is filler, keys come from `1..V/2` and values
//! from `V/2..V`. Each key-value pair occupies two consecutive positions.
//! A query repeats a key later in the sequence and is labeled with that
//! key's value at the query position.

use serde::{Deserialize, Serialize};

use super::TaskBatch;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const FILLER: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MqarConfig {
    pub vocab_size: usize,
    pub n_kv_pairs: usize,
    pub seq_len: usize,
    pub n_queries: usize,
    #[serde(default)]
    pub seed: u64,
    /// Queries may appear between pairs (always after their own pair)
    /// instead of after all pairs.
    #[serde(default)]
    pub interleaved: bool,
}

impl MqarConfig {
    pub fn new(vocab_size: usize, n_kv_pairs: usize, seq_len: usize, n_queries: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            n_kv_pairs,
            seq_len,
            n_queries,
            seed,
            interleaved: false,
        }
    }

    pub fn keys(&self) -> std::ops::Range<usize> {
        1..self.vocab_size / 2
    }

    pub fn values(&self) -> std::ops::Range<usize> {
        self.vocab_size / 2..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if 2 * self.n_kv_pairs + self.n_queries > self.seq_len {
            return Err(Error::Config(format!(
                "mqar: 2 * {} pairs + {} queries exceed seq_len {}",
                self.n_kv_pairs, self.n_queries, self.seq_len
            )));
        }
        if self.keys().len() < self.n_kv_pairs {
            return Err(Error::Config(format!(
                "mqar: vocabulary {} has {} distinct keys, {} pairs requested",
                self.vocab_size,
                self.keys().len(),
                self.n_kv_pairs
            )));
        }
        if self.n_queries > 0 && self.n_kv_pairs == 0 {
            return Err(Error::Config("mqar: queries need at least one pair".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Item {
    Pair(usize),
    Query(usize),
}

/// Which pair each query asks about: every pair once per round, shuffled.
fn query_targets(cfg: &MqarConfig, rng: &mut SeededRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(cfg.n_queries);
    while out.len() < cfg.n_queries {
        let mut round: Vec<usize> = (0..cfg.n_kv_pairs).collect();
        rng.shuffle(&mut round);
        out.extend(round.into_iter().take(cfg.n_queries - out.len()));
    }
    out
}

fn layout(cfg: &MqarConfig, rng: &mut SeededRng) -> Vec<Item> {
    let targets = query_targets(cfg, rng);
    let mut items: Vec<Item> = (0..cfg.n_kv_pairs).map(Item::Pair).collect();
    if cfg.interleaved {
        for &j in &targets {
            let after = items
                .iter()
                .position(|it| matches!(it, Item::Pair(p) if *p == j))
                .unwrap()
                + 1;
            let at = after + rng.below(items.len() - after + 1);
            items.insert(at, Item::Query(j));
        }
    } else {
        items.extend(targets.into_iter().map(Item::Query));
    }
    items
}

fn fill_sequence(cfg: &MqarConfig, rng: &mut SeededRng, tokens: &mut [usize], labels: &mut [usize], mask: &mut [bool]) {
    let (keys, values) = (cfg.keys(), cfg.values());
    let mut pool: Vec<usize> = keys.collect();
    rng.shuffle(&mut pool);
    let pair_keys = &pool[..cfg.n_kv_pairs];
    let pair_values: Vec<usize> = (0..cfg.n_kv_pairs)
        .map(|_| values.start + rng.below(values.len()))
        .collect();
    let items = layout(cfg, rng);
    let used: usize = items
        .iter()
        .map(|it| if matches!(it, Item::Pair(_)) { 2 } else { 1 })
        .sum();
    let slack = cfg.seq_len - used;
    if cfg.interleaved {
        // filler scattered between items
        let mut gaps = vec![0usize; items.len() + 1];
        for _ in 0..slack {
            gaps[rng.below(items.len() + 1)] += 1;
        }
        let mut at = gaps[0];
        for (it, gap) in items.iter().zip(&gaps[1..]) {
            at += place(*it, at, pair_keys, &pair_values, tokens, labels, mask);
            at += gap;
        }
    } else {
        // pairs packed at the front, queries at sorted random slots after them
        let pairs_end = 2 * cfg.n_kv_pairs;
        let mut slots: Vec<usize> = (pairs_end..cfg.seq_len).collect();
        rng.shuffle(&mut slots);
        let mut slots = slots[..cfg.n_queries].to_vec();
        slots.sort_unstable();
        let mut q = slots.into_iter();
        let mut at = 0;
        for it in items {
            match it {
                Item::Pair(_) => at += place(it, at, pair_keys, &pair_values, tokens, labels, mask),
                Item::Query(_) => {
                    place(it, q.next().unwrap(), pair_keys, &pair_values, tokens, labels, mask);
                }
            }
        }
    }
}

fn place(
    it: Item,
    at: usize,
    keys: &[usize],
    values: &[usize],
    tokens: &mut [usize],
    labels: &mut [usize],
    mask: &mut [bool],
) -> usize {
    match it {
        Item::Pair(j) => {
            tokens[at] = keys[j];
            tokens[at + 1] = values[j];
            2
        }
        Item::Query(j) => {
            tokens[at] = keys[j];
            labels[at] = values[j];
            mask[at] = true;
            1
        }
    }
}

/// `batch` sequences; sequence `b` draws from stream `b` of `cfg.seed`.
pub fn gen_mqar(cfg: &MqarConfig, batch: usize) -> Result<TaskBatch> {
    cfg.validate()?;
    let n = cfg.seq_len;
    let mut out = TaskBatch::empty(batch, n);
    for b in 0..batch {
        let mut rng = SeededRng::stream(cfg.seed, b as u64);
        let r = b * n..(b + 1) * n;
        fill_sequence(
            cfg,
            &mut rng,
            &mut out.tokens[r.clone()],
            &mut out.labels[r.clone()],
            &mut out.mask[r],
        );
    }
    Ok(out)
}
