//! End-to-end training behaviour on the small tasks.

use std::path::PathBuf;

use zeros_core::model::{Model, ModelConfig};
use zeros_core::tasks::{MemorizeConfig, MqarConfig, TaskConfig};
use zeros_core::train::{batch_loss, evaluate, heldout_batches, train_loop, TrainConfig};
use zeros_core::Mechanism;

const MECHANISMS: [Mechanism; 3] = [Mechanism::Zeros, Mechanism::Softmax, Mechanism::LinattnElu];

fn repo_config(name: &str) -> TrainConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    TrainConfig::load(path).unwrap()
}

#[test]
fn memorize_reaches_near_perfect_accuracy() {
    let cfg = repo_config("memorize.toml");
    assert_eq!((cfg.steps, cfg.model.n_layers, cfg.eval_every), (2000, 1, 200));
    let out = train_loop(&cfg).unwrap();
    let last = out.metrics.last().unwrap();
    assert!(last.eval_accuracy >= 0.99, "final accuracy {}", last.eval_accuracy);

    // each record carries the mean loss of its 200-step window
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.train_loss).collect();
    for w in losses.windows(2) {
        if w[0] < 0.05 {
            break;
        }
        assert!(w[1] < w[0], "window loss rose: {losses:?}");
    }
    assert!(
        losses.iter().any(|&l| l < 0.05),
        "loss never fell below 0.05: {losses:?}"
    );
    assert!(out.model.params.named().iter().all(|(_, t)| t.is_finite()));
}

#[test]
fn untrained_loss_is_log_vocab() {
    let vocab = 48;
    let task = TaskConfig::Memorize(MemorizeConfig::new(vocab, 32, 3, 0));
    let data = heldout_batches(&task, 5, 2, 16).unwrap();
    for mech in MECHANISMS {
        let model = Model::new(ModelConfig::new(vocab, 2, 32, 4, 32, mech)).unwrap();
        let mean = data.iter().map(|b| batch_loss(&model, b).unwrap()).sum::<f64>() / data.len() as f64;
        let expect = (vocab as f64).ln();
        assert!(
            (mean - expect).abs() <= 0.05 * expect,
            "{mech:?}: {mean} vs ln {vocab} = {expect}"
        );
    }
}

#[test]
fn untrained_mqar_is_at_chance() {
    let cfg = MqarConfig::new(64, 8, 64, 8, 0);
    let task = TaskConfig::Mqar(cfg.clone());
    let data = heldout_batches(&task, 1, 8, 32).unwrap();
    let chance = 1.0 / cfg.values().len() as f64;
    let positions = (8 * 32 * 8) as f64;
    let noise = (chance * (1.0 - chance) / positions).sqrt();
    for mech in MECHANISMS {
        let model = Model::new(ModelConfig::new(64, 2, 32, 4, 64, mech)).unwrap();
        let acc = evaluate(&model, &data).unwrap();
        assert_eq!(acc.total, 8 * 32 * 8);
        assert!(
            acc.value <= chance + 4.0 * noise,
            "{mech:?}: {} vs chance {chance}",
            acc.value
        );
    }
}

#[test]
fn every_mechanism_learns_memorize() {
    for mech in MECHANISMS {
        let task = TaskConfig::Memorize(MemorizeConfig::new(16, 8, 2, 0));
        let mut cfg = TrainConfig::new(task, ModelConfig::new(16, 1, 16, 2, 8, mech), 150);
        cfg.batch_size = 8;
        cfg.eval_every = 50;
        cfg.lr = 1e-2;
        let out = train_loop(&cfg).unwrap();
        let (first, last) = (&out.metrics[0], out.metrics.last().unwrap());
        assert!(last.train_loss < 0.5 * first.train_loss, "{mech:?}: {:?}", out.metrics);
        assert!(out.model.params.named().iter().all(|(_, t)| t.is_finite()));
    }
}

#[test]
fn seeds_change_runs_and_reruns_do_not() {
    let task = TaskConfig::Mqar(MqarConfig::new(32, 4, 16, 4, 0));
    let base = TrainConfig::new(task, ModelConfig::new(32, 1, 16, 2, 16, Mechanism::Zeros), 8);
    let run = |seed| {
        let mut c = base.clone().with_seed(seed);
        c.batch_size = 4;
        c.eval_every = 4;
        train_loop(&c).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert!(a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_run(y)));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}
