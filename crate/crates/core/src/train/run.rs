//! The training loop.
//!
//! Batches are generated on a worker thread a few steps ahead of the
//! optimizer; the optimizer thread alone owns parameters and moments.
//! Every batch seed is derived from the run seed and the step index, so a
//! run is a pure function of its config.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelParams};
use crate::rng::SeededRng;
use crate::tasks::{masked_accuracy, Accuracy, TaskBatch, TaskConfig};
use crate::tensor::{Graph, Tensor};

/// Batches the worker may run ahead of the optimizer.
const PREFETCH: usize = 4;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CKPT: &str = "final.zsck";
pub const LATEST_CKPT: &str = "latest.zsck";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.jsonl";

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Optimizer steps completed.
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Milliseconds since the run (or resumed segment) started.
    pub wall_ms: f64,
    /// Pre-clip global gradient norm of the last step.
    pub grad_norm: f64,
}

impl MetricsRecord {
    /// Equality ignoring the wall clock.
    pub fn same_run(&self, other: &Self) -> bool {
        self.step == other.step
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.eval_accuracy.to_bits() == other.eval_accuracy.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory for config, metrics and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint's step, parameters and moments.
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
    pub model: Model,
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    SeededRng::stream(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), stream).next_u64()
}

/// Seed of the training batch consumed at optimizer step `step`.
pub fn train_batch_seed(seed: u64, step: usize) -> u64 {
    derive_seed(seed, TRAIN_STREAM, step as u64)
}

/// Fixed evaluation set of a run.
pub fn eval_batches(task: &TaskConfig, seed: u64, n_batches: usize, batch_size: usize) -> Result<Vec<TaskBatch>> {
    (0..n_batches)
        .map(|i| task.generate(batch_size, derive_seed(seed, EVAL_STREAM, i as u64)))
        .collect()
}

/// Batches disjoint in seed from both the training stream and the run's
/// own evaluation set, for scoring a finished checkpoint.
pub fn heldout_batches(task: &TaskConfig, seed: u64, n_batches: usize, batch_size: usize) -> Result<Vec<TaskBatch>> {
    (0..n_batches)
        .map(|i| task.generate(batch_size, derive_seed(seed, HELDOUT_STREAM, i as u64)))
        .collect()
}

/// Mean next-token loss of `batch` under `params`.
pub fn batch_loss(model: &Model, batch: &TaskBatch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let logits = model.logits(&mut g, &vars, &batch.tokens, batch.seq_len)?;
    let loss = g.cross_entropy(logits, &batch.labels, &batch.mask)?;
    g.value(loss).item()
}

/// Masked accuracy pooled over `batches`.
pub fn evaluate(model: &Model, batches: &[TaskBatch]) -> Result<Accuracy> {
    let (mut correct, mut total) = (0, 0);
    for b in batches {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let logits = model.logits(&mut g, &vars, &b.tokens, b.seq_len)?;
        let acc = masked_accuracy(g.value(logits), &b.labels, &b.mask)?;
        correct += acc.correct;
        total += acc.total;
    }
    Ok(Accuracy {
        value: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        empty_mask: total == 0,
    })
}

/// Loss and parameter gradients for one batch.
fn loss_and_grads(model: &Model, batch: &TaskBatch) -> Result<(f64, ModelParams)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let logits = model.logits(&mut g, &vars, &batch.tokens, batch.seq_len)?;
    let loss = g.cross_entropy(logits, &batch.labels, &batch.mask)?;
    g.backward(loss)?;
    let grads = vars.map(|_, &v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())));
    Ok((g.value(loss).item()?, grads))
}

fn first_non_finite(params: &ModelParams) -> Option<(String, usize)> {
    params
        .named()
        .into_iter()
        .find_map(|(n, t)| t.data().iter().position(|x| !x.is_finite()).map(|i| (n, i)))
}

struct RunDir {
    root: PathBuf,
    metrics: File,
}

impl RunDir {
    fn open(root: &Path, cfg: &TrainConfig, resume: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let cfg_path = root.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let path = root.join(METRICS_FILE);
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume)
            .truncate(!resume)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
        })
    }

    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.root.join(METRICS_FILE), e))
    }

    fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(self.root.join(name))
    }
}

/// Writes the offending batch and returns the abort error.
fn abort(dir: Option<&RunDir>, step: usize, batch: &TaskBatch, what: String, index: usize) -> Error {
    let dump = batch.to_jsonl();
    let place = match dir {
        Some(d) => {
            let path = d.root.join(NONFINITE_DUMP);
            match fs::write(&path, &dump) {
                Ok(()) => path.display().to_string(),
                Err(e) => format!("unwritable dump {}: {e}", path.display()),
            }
        }
        None => {
            eprintln!("non-finite batch at step {step}:\n{dump}");
            "stderr".to_string()
        }
    };
    Error::NonFinite {
        op: format!("training step {step}: {what} (batch dumped to {place})"),
        index,
    }
}

pub fn train_loop(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, RunOptions::default())
}

pub fn train_with(cfg: &TrainConfig, opts: RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut state) = match opts.resume {
        Some(ck) => {
            let model = Model::from_params(cfg.model.clone(), ck.params)?;
            let state = match ck.moments {
                Some((m, v)) => AdamState { m, v, step: ck.step },
                None => AdamState {
                    step: ck.step,
                    ..AdamState::new(&model.params)
                },
            };
            (model, state)
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let state = AdamState::new(&model.params);
            (model, state)
        }
    };
    let start = state.step as usize;
    if start > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, beyond the configured {} steps",
            cfg.steps
        )));
    }
    let mut dir = match &opts.out_dir {
        Some(root) => Some(RunDir::open(root, cfg, start > 0)?),
        None => None,
    };
    let evals = eval_batches(&cfg.task, cfg.seed, cfg.eval_batches, cfg.batch_size)?;
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let (mut loss_sum, mut loss_count, mut last_norm) = (0.0, 0usize, 0.0);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<TaskBatch>>(PREFETCH);
        let task = &cfg.task;
        scope.spawn(move || {
            for step in start..cfg.steps {
                let batch = task.generate(cfg.batch_size, train_batch_seed(cfg.seed, step));
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in start..cfg.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Contract("batch worker stopped early".into()))??;
            let (loss, grads) = match loss_and_grads(&model, &batch) {
                Ok(x) => x,
                Err(Error::NonFinite { op, index }) => return Err(abort(dir.as_ref(), step, &batch, op, index)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(abort(dir.as_ref(), step, &batch, format!("loss {loss}"), 0));
            }
            let adam = AdamConfig {
                lr: cfg.lr_at(step),
                betas: cfg.betas,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
                grad_clip: cfg.grad_clip,
            };
            let stats = match adam_step(&mut model.params, &grads, &mut state, &adam) {
                Ok(s) => s,
                Err(Error::NonFinite { op, index }) => return Err(abort(dir.as_ref(), step, &batch, op, index)),
                Err(e) => return Err(e),
            };
            if let Some((name, i)) = first_non_finite(&model.params) {
                return Err(abort(dir.as_ref(), step, &batch, format!("parameter {name}"), i));
            }
            loss_sum += loss;
            loss_count += 1;
            last_norm = stats.grad_norm;
            let done = step + 1;
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let record = MetricsRecord {
                    step: done,
                    train_loss: loss_sum / loss_count as f64,
                    eval_accuracy: evaluate(&model, &evals)?.value,
                    wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                    grad_norm: last_norm,
                };
                loss_sum = 0.0;
                loss_count = 0;
                if let Some(d) = dir.as_mut() {
                    d.record(&record)?;
                    d.checkpoint(LATEST_CKPT, &snapshot(&model, &state))?;
                }
                metrics.push(record);
            }
        }
        Ok(())
    })?;

    let checkpoint = snapshot(&model, &state);
    if let Some(d) = &dir {
        d.checkpoint(FINAL_CKPT, &checkpoint)?;
    }
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        model,
    })
}

fn snapshot(model: &Model, state: &AdamState) -> Checkpoint {
    Checkpoint {
        params: model.params.clone(),
        step: state.step,
        moments: Some((state.m.clone(), state.v.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mechanism;
    use crate::model::ModelConfig;
    use crate::tasks::MemorizeConfig;

    fn tiny(steps: usize) -> TrainConfig {
        let task = TaskConfig::Memorize(MemorizeConfig::new(8, 6, 1, 0));
        let model = ModelConfig::new(8, 1, 8, 2, 6, Mechanism::Zeros);
        let mut c = TrainConfig::new(task, model, steps);
        c.batch_size = 4;
        c.eval_every = 5;
        c.eval_batches = 1;
        c.lr = 1e-2;
        c
    }

    #[test]
    fn zero_steps_is_untrained() {
        let c = tiny(0);
        let out = train_loop(&c).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint.step, 0);
        assert_eq!(out.checkpoint.params, Model::new(c.model.clone()).unwrap().params);
    }

    #[test]
    fn records_at_eval_every_and_end() {
        let out = train_loop(&tiny(12)).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 12]);
        assert_eq!(out.checkpoint.step, 12);
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = train_loop(&tiny(10)).unwrap();
        let b = train_loop(&tiny(10)).unwrap();
        assert!(a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_run(y)));
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn batch_seeds_differ_per_step() {
        assert_ne!(train_batch_seed(0, 0), train_batch_seed(0, 1));
        assert_ne!(train_batch_seed(0, 0), train_batch_seed(1, 0));
    }

    #[test]
    fn resume_beyond_steps_rejected() {
        let c = tiny(3);
        let mut ck = train_loop(&c).unwrap().checkpoint;
        ck.step = 10;
        let opts = RunOptions {
            resume: Some(ck),
            ..Default::default()
        };
        assert!(matches!(train_with(&c, opts), Err(Error::Config(_))));
    }
}
