//! `zeros`: verification, training, evaluation and benchmarks.
//!
//! Exit codes: 0 on success, 1 on a failed check or runtime error, 2 on a
//! missing or invalid config, an unreadable file or a checkpoint that does
//! not fit the config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use zeros_core::bench::{run_bench, to_csv, BenchConfig, BenchMechanism};
use zeros_core::model::{Checkpoint, Model};
use zeros_core::train::{evaluate, heldout_batches, train_with, RunOptions, TrainConfig, FINAL_CKPT, SEED_ENV};
use zeros_core::verify::{run_verify, Fault, VerifyOptions};
use zeros_core::{Error, Precision};

#[derive(Parser)]
#[command(name = "zeros", version, about = "Zero-sum linear attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        #[arg(long, default_value = "double", value_parser = parse_precision)]
        precision: Precision,
        /// Inject a known defect (test use): skip_eps.
        #[arg(long, value_parser = parse_fault)]
        fault: Option<Fault>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from a TOML config; writes a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; defaults to the checkpoint's directory when
        /// resuming, else `runs/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out batches of the config's task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Number of held-out batches; defaults to the config's eval_batches.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Forward-pass latency against sequence length, as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "zeros,zeros_naive,softmax,linattn", value_parser = parse_mechanism)]
        mechanisms: Vec<BenchMechanism>,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value = "double", value_parser = parse_precision)]
        precision: Precision,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    Precision::parse(s).ok_or_else(|| format!("unknown precision {s:?}; use double or single"))
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    Fault::parse(s).map_err(|e| e.to_string())
}

fn parse_mechanism(s: &str) -> Result<BenchMechanism, String> {
    BenchMechanism::parse(s).map_err(|e| e.to_string())
}

/// `--seed`, else the environment override, else 0.
fn seed_or_env(seed: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")).into()),
        Err(_) => Ok(0),
    }
}

fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig::load(path)?.with_env_seed()?;
    Ok(cfg)
}

fn verify(precision: Precision, fault: Option<Fault>, seed: Option<u64>) -> anyhow::Result<bool> {
    let opts = VerifyOptions {
        precision,
        fault,
        seed: seed_or_env(seed)?,
    };
    let report = run_verify(opts);
    print!("{}", report.table());
    Ok(report.passed())
}

fn train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let resume_ckpt = resume.map(|p| Checkpoint::load(p, &cfg.model)).transpose()?;
    let out_dir = match (out, resume) {
        (Some(dir), _) => dir,
        (None, Some(ckpt)) => ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        (None, None) => {
            let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy());
            Path::new("runs").join(stem.as_ref())
        }
    };
    let outcome = train_with(
        &cfg,
        RunOptions {
            out_dir: Some(out_dir.clone()),
            resume: resume_ckpt,
        },
    )?;
    for m in &outcome.metrics {
        println!(
            "step {:>6}  loss {:.5}  eval_acc {:.4}  grad_norm {:.4}",
            m.step, m.train_loss, m.eval_accuracy, m.grad_norm
        );
    }
    println!("run directory: {}", out_dir.display());
    println!("checkpoint: {}", out_dir.join(FINAL_CKPT).display());
    Ok(())
}

fn eval(ckpt: &Path, config: &Path, batches: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let checkpoint = Checkpoint::load(ckpt, &cfg.model)?;
    let model = Model::from_params(cfg.model.clone(), checkpoint.params)?;
    let n = batches.unwrap_or(cfg.eval_batches);
    let data = heldout_batches(&cfg.task, cfg.seed, n, cfg.batch_size)?;
    let acc = evaluate(&model, &data)?;
    let report = serde_json::json!({
        "task": cfg.task.name(),
        "mechanism": cfg.model.mechanism.as_str(),
        "step": checkpoint.step,
        "accuracy": acc.value,
        "correct": acc.correct,
        "total": acc.total,
        "empty_mask": acc.empty_mask,
    });
    println!("{report}");
    if acc.empty_mask {
        eprintln!("warning: no masked positions; accuracy is vacuous");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    mechanisms: Vec<BenchMechanism>,
    seq_lens: Vec<usize>,
    d_model: usize,
    n_heads: usize,
    reps: usize,
    warmup: usize,
    precision: Precision,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        mechanisms,
        seq_lens,
        d_model,
        n_heads,
        reps,
        warmup,
        precision,
        seed: seed_or_env(seed)?,
    };
    let csv = to_csv(&run_bench(&cfg)?);
    match out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// 2 for problems with what the user handed in, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Io { .. } | Error::Checkpoint(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { precision, fault, seed } => verify(precision, fault, seed).map(|ok| if ok { 0 } else { 1 }),
        Command::Train { config, resume, out } => train(&config, resume.as_deref(), out).map(|_| 0),
        Command::Eval { ckpt, config, batches } => eval(&ckpt, &config, batches).map(|_| 0),
        Command::Bench {
            mechanisms,
            seq_lens,
            d_model,
            n_heads,
            reps,
            warmup,
            precision,
            seed,
            out,
        } => bench(
            mechanisms, seq_lens, d_model, n_heads, reps, warmup, precision, seed, out,
        )
        .map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
