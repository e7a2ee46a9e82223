use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zeros(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeros"))
        .args(args)
        .env_remove("ZEROS_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn memorize_config(dir: &Path, steps: usize) -> String {
    let path = dir.join(format!("memorize_{steps}.toml"));
    let text = format!(
        r#"steps = {steps}
batch_size = 16
eval_every = 20
lr = 3e-3
warmup_frac = 0.0
seed = 3

[task]
name = "memorize"
vocab_size = 16
seq_len = 8
mapping_seed = 1

[model]
vocab_size = 16
n_layers = 1
d_model = 16
n_heads = 2
max_seq_len = 8
mechanism = "zeros"
"#
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn mqar_config(dir: &Path, d_model: usize) -> String {
    let path = dir.join(format!("mqar_{d_model}.toml"));
    let text = format!(
        r#"steps = 4
batch_size = 4
eval_every = 2
eval_batches = 1
seed = 1

[task]
name = "mqar"
vocab_size = 32
n_kv_pairs = 4
seq_len = 16
n_queries = 4

[model]
vocab_size = 32
n_layers = 1
d_model = {d_model}
n_heads = 2
max_seq_len = 16
mechanism = "zeros"
"#
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn accuracy(eval_stdout: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(eval_stdout.trim()).unwrap();
    v["accuracy"].as_f64().unwrap()
}

/// Metrics lines without the wall clock.
fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn verify_passes_and_is_reproducible() {
    let a = zeros(&["verify"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert!(stdout(&a).contains("0 failed"));
    let b = zeros(&["verify"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_fault_fails_zero_sum() {
    let o = zeros(&["verify", "--fault", "skip_eps"]);
    assert_eq!(o.status.code(), Some(1));
    let line = stdout(&o)
        .lines()
        .find(|l| l.contains(" zero_sum "))
        .unwrap()
        .to_string();
    assert!(line.ends_with("FAIL"), "{line}");
}

#[test]
fn verify_single_precision() {
    let o = zeros(&["verify", "--precision", "single"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.contains("scan_vs_naive"))
        .unwrap()
        .to_string();
    assert!(line.contains("single") && line.contains("1.000e-3"), "{line}");
}

#[test]
fn missing_config_exits_2() {
    let o = zeros(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn train_eval_and_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mqar_config(dir.path(), 16);
    let run = dir.path().join("run");
    let o = zeros(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "final.zsck", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let steps: Vec<u64> = metrics(&run).iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, [2, 4]);
    let ckpt = run.join("final.zsck");
    let e = zeros(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(e.status.code(), Some(0));
    let acc = accuracy(&stdout(&e));
    assert!((0.0..=1.0).contains(&acc));
    let wide = mqar_config(dir.path(), 32);
    let e = zeros(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--config", &wide]);
    assert_eq!(e.status.code(), Some(2));
}

#[test]
fn train_is_bit_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mqar_config(dir.path(), 16);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = zeros(&["train", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(
        fs::read(a.join("final.zsck")).unwrap(),
        fs::read(b.join("final.zsck")).unwrap()
    );
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mqar_config(dir.path(), 16);
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_zeros"))
        .args(["train", "--config", &cfg, "--out", run.to_str().unwrap()])
        .env("ZEROS_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let written = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.lines().any(|l| l.trim() == "seed = 41"), "{written}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (half, full) = (memorize_config(dir.path(), 100), memorize_config(dir.path(), 200));
    let (straight, split) = (dir.path().join("straight"), dir.path().join("split"));
    assert!(
        zeros(&["train", "--config", &full, "--out", straight.to_str().unwrap()])
            .status
            .success()
    );
    assert!(zeros(&["train", "--config", &half, "--out", split.to_str().unwrap()])
        .status
        .success());
    let ckpt = split.join("final.zsck");
    let o = zeros(&["train", "--config", &full, "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let steps: Vec<u64> = metrics(&split).iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (1..=10).map(|i| i * 20).collect::<Vec<_>>());
    let score = |d: &Path| {
        let ckpt = d.join("final.zsck");
        accuracy(&stdout(&zeros(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--config",
            &full,
        ])))
    };
    let (a, b) = (score(&straight), score(&split));
    assert!((a - b).abs() <= 0.02, "{a} vs {b}");
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let args = [
        "bench",
        "--mechanisms",
        "zeros,softmax",
        "--seq-lens",
        "16,32",
        "--d-model",
        "16",
        "--n-heads",
        "2",
        "--reps",
        "5",
    ];
    let o = zeros(&args);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("mechanism,seq_len,reps,mean_ms"));
    assert_eq!(lines.len(), 5);
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    assert!(zeros(&with_out).status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
    let few = zeros(&["bench", "--reps", "3", "--seq-lens", "8", "--d-model", "16"]);
    assert_eq!(few.status.code(), Some(2));
}
