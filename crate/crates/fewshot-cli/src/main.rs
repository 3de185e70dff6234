//! Experiment runner for few-shot learning with convex base learners.
//!
//! Subcommands generate datasets, meta-train embeddings, evaluate
//! checkpoints, and sweep experiment axes (meta-training shot, QP iteration
//! cap, base learner). Artifacts land in --out: summary.json,
//! resolved_config.toml, and per command metrics.jsonl / sweep.csv /
//! checkpoint.json. Failures write error.json and exit nonzero.

mod config;
mod experiments;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::experiments::CommandContext;

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot meta-learning experiments with differentiable convex base learners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for run artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Shorthand setting train.seed and eval.seed together.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-key config override, repeatable: --set train.epochs=30
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for episode batches (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic class dataset with its split manifest.
    GenData,
    /// Meta-train an embedding; writes checkpoint, metrics, and summary.
    Train,
    /// Evaluate a saved checkpoint on one split.
    Eval,
    /// Train across a grid of meta-training shots; accuracy-vs-shot CSV.
    SweepShot,
    /// Evaluate one checkpoint across QP iteration caps; accuracy-vs-cap CSV.
    SweepQpIters,
    /// Train every base learner under identical seeds; accuracy/timing table.
    CompareLearners,
    /// Run the built-in oracle suites and report pass/fail.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::SweepShot => "sweep-shot",
            Command::SweepQpIters => "sweep-qp-iters",
            Command::CompareLearners => "compare-learners",
            Command::Selftest => "selftest",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }

    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("eval.seed={seed}"));
    }
    let config = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;

    if matches!(cli.command, Command::Selftest) {
        return experiments::selftest();
    }

    let out_dir = cli
        .out
        .as_ref()
        .with_context(|| format!("{} writes artifacts; pass --out DIR", cli.command.name()))?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    // A fresh attempt invalidates any failure report from a previous run
    // into the same directory.
    match std::fs::remove_file(out_dir.join("error.json")) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e).context("clearing stale error.json"),
    }
    let hash = config.hash();
    let ctx = CommandContext {
        config: &config,
        config_hash: &hash,
        out_dir,
    };

    match cli.command {
        Command::GenData => experiments::gen_data(&ctx),
        Command::Train => experiments::train(&ctx),
        Command::Eval => experiments::eval(&ctx),
        Command::SweepShot => experiments::sweep_shot(&ctx),
        Command::SweepQpIters => experiments::sweep_qp_iters(&ctx),
        Command::CompareLearners => experiments::compare_learners(&ctx),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        if let Some(out) = &cli.out {
            let chain: Vec<String> = err.chain().map(|cause| cause.to_string()).collect();
            let body = serde_json::json!({
                "schema_version": config::SCHEMA_VERSION,
                "command": cli.command.name(),
                "error": chain.first().cloned().unwrap_or_default(),
                "chain": chain,
            });
            let report = serde_json::to_string_pretty(&body).unwrap_or_default() + "\n";
            if std::fs::create_dir_all(out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), report);
            }
        }
        std::process::exit(1);
    }
}
