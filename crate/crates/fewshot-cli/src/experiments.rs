//! Command implementations and artifact writers. Every command stamps its
//! outputs with the resolved config, its hash, and the seeds, so any run can
//! be reproduced from its own artifacts.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use diffqp::{backward, oracle, solve, SolverConfig};
use fewshot::embedding::{
    forward, init_params, load_checkpoint, save_checkpoint, vjp, EmbeddingSpec, ParameterStore,
};
use fewshot::episodes::{
    sample_episode, save_dataset, synthetic_task_distribution, ClassDataset, Split,
};
use fewshot::learners::{fit, LearnerConfig, LearnerKind, SupportSet};
use fewshot::meta::{episode_gradients, evaluate, meta_train, EvalRecord};
use fewshot::reference::{ridge_closed_form, svm_dual_objective, svm_dual_projected_gradient};

use crate::config::{cap_label, CapSpec, ExperimentConfig, SCHEMA_VERSION};

pub struct CommandContext<'a> {
    pub config: &'a ExperimentConfig,
    pub config_hash: &'a str,
    pub out_dir: &'a Path,
}

impl CommandContext<'_> {
    /// summary.json plus a resolved_config.toml that reproduces this run when
    /// passed back through --config.
    fn write_summary(&self, command: &str, extras: serde_json::Value) -> Result<()> {
        let mut body = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config_hash": self.config_hash,
            "seeds": {
                "data": self.config.data.seed,
                "train": self.config.train.seed,
                "eval": self.config.eval.seed,
            },
            "config": self.config,
        });
        if let (Some(target), Some(source)) = (body.as_object_mut(), extras.as_object()) {
            for (key, value) in source {
                target.insert(key.clone(), value.clone());
            }
        }
        let summary_path = self.out_dir.join("summary.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&body)? + "\n")
            .with_context(|| format!("writing {}", summary_path.display()))?;

        let toml_path = self.out_dir.join("resolved_config.toml");
        let text = toml::to_string_pretty(self.config).context("serializing resolved config")?;
        std::fs::write(&toml_path, text)
            .with_context(|| format!("writing {}", toml_path.display()))?;
        Ok(())
    }

    fn write_metrics(&self, records: &[EvalRecord]) -> Result<()> {
        let mut text = String::new();
        for record in records {
            text.push_str(&serde_json::to_string(record)?);
            text.push('\n');
        }
        let path = self.out_dir.join("metrics.jsonl");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn write_sweep_csv<T: Serialize>(&self, rows: &[T]) -> Result<()> {
        let path = self.out_dir.join("sweep.csv");
        let mut writer = csv::Writer::from_path(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        for row in rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn gen_data(ctx: &CommandContext) -> Result<()> {
    let data = &ctx.config.data;
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let dataset = synthetic_task_distribution(
        data.classes_per_split,
        data.items_per_class,
        data.informative_dim,
        data.noise_dim,
        data.cluster_spread,
        &mut rng,
    )?;
    save_dataset(ctx.out_dir, &dataset, data.format.to_format())?;
    println!(
        "wrote {} classes x {} items ({}-dim, {:?}) to {}",
        dataset.num_classes(),
        data.items_per_class,
        dataset.feature_dim(),
        data.format,
        ctx.out_dir.display()
    );
    ctx.write_summary(
        "gen-data",
        serde_json::json!({
            "num_classes": dataset.num_classes(),
            "feature_dim": dataset.feature_dim(),
            "items_per_class": data.items_per_class,
            "split_sizes": {
                "meta_train": dataset.classes_in(Split::MetaTrain).len(),
                "meta_val": dataset.classes_in(Split::MetaVal).len(),
                "meta_test": dataset.classes_in(Split::MetaTest).len(),
            },
        }),
    )
}

/// Earliest epoch whose validation accuracy is strictly best; None when no
/// validation records exist.
fn best_val_epoch(records: &[EvalRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for record in records {
        if record.split != Split::MetaVal.as_str() {
            continue;
        }
        if let Some(epoch) = record.epoch {
            match best {
                Some((_, acc)) if record.mean_accuracy <= acc => {}
                _ => best = Some((epoch, record.mean_accuracy)),
            }
        }
    }
    best.map(|(epoch, _)| epoch)
}

pub fn train(ctx: &CommandContext) -> Result<()> {
    let dataset = ctx.config.dataset()?;
    let meta = ctx.config.meta_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed);
    let started = Instant::now();
    let (params, scale, metrics) = meta_train(&meta, &dataset, &mut rng)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let checkpoint_path = ctx.out_dir.join("checkpoint.json");
    save_checkpoint(
        &checkpoint_path,
        &meta.embedding,
        &params,
        scale.gamma,
        ctx.config.train.seed,
    )?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed);
    let final_record = evaluate(
        &meta.embedding,
        &params,
        scale.gamma,
        &dataset,
        ctx.config.eval.split.to_split(),
        &meta.learner,
        &meta.solver,
        &ctx.config.eval_episode_config(None),
        ctx.config.eval.episodes,
        None,
        &mut eval_rng,
    )?;
    println!(
        "trained {} epochs in {:.1}s; {} accuracy {:.3} +/- {:.3}",
        meta.epochs,
        train_seconds,
        final_record.split,
        final_record.mean_accuracy,
        final_record.ci_halfwidth
    );

    let train_loss = metrics.train_loss;
    let mut records = metrics.evaluations;
    records.push(final_record);
    ctx.write_metrics(&records)?;
    ctx.write_summary(
        "train",
        serde_json::json!({
            "train_loss": train_loss,
            "best_val_epoch": best_val_epoch(&records),
            "gamma": scale.gamma,
            "train_seconds": train_seconds,
            "evaluations": records,
            "checkpoint": checkpoint_path,
        }),
    )
}

pub fn eval(ctx: &CommandContext) -> Result<()> {
    let checkpoint = ctx.config.eval.checkpoint.as_ref().context(
        "eval needs a checkpoint: set eval.checkpoint in the config or pass \
         --set eval.checkpoint=PATH",
    )?;
    let (spec, params, gamma, _) = load_checkpoint(checkpoint)?;
    let dataset = ctx.config.dataset()?;
    let learner = ctx.config.learner.to_config()?;
    let solver = ctx.config.solver.to_config();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed);
    let record = evaluate(
        &spec,
        &params,
        gamma,
        &dataset,
        ctx.config.eval.split.to_split(),
        &learner,
        &solver,
        &ctx.config.eval_episode_config(None),
        ctx.config.eval.episodes,
        None,
        &mut rng,
    )?;
    println!(
        "{} accuracy {:.3} +/- {:.3} over {} episodes",
        record.split, record.mean_accuracy, record.ci_halfwidth, record.episodes
    );
    let records = vec![record];
    ctx.write_metrics(&records)?;
    ctx.write_summary(
        "eval",
        serde_json::json!({ "evaluations": records, "checkpoint": checkpoint }),
    )
}

#[derive(Serialize)]
struct ShotSweepRow {
    schema_version: u32,
    train_shot: usize,
    test_shot: usize,
    episodes: usize,
    mean_accuracy: f64,
    std_accuracy: f64,
    ci_halfwidth: f64,
}

pub fn sweep_shot(ctx: &CommandContext) -> Result<()> {
    let mut train_shots = ctx.config.sweep.train_shots.clone();
    train_shots.sort_unstable();
    train_shots.dedup();
    let mut test_shots = ctx.config.sweep.test_shots.clone();
    test_shots.sort_unstable();
    test_shots.dedup();
    if train_shots.is_empty() || test_shots.is_empty() {
        bail!("sweep.train_shots and sweep.test_shots must be nonempty");
    }

    let dataset = ctx.config.dataset()?;
    let mut rows = Vec::new();
    for &train_shot in &train_shots {
        let mut meta = ctx.config.meta_config()?;
        meta.train_shot = train_shot;
        // Same training stream for every arm; only the shot differs.
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed);
        let (params, scale, _) = meta_train(&meta, &dataset, &mut rng)?;
        save_checkpoint(
            &ctx.out_dir.join(format!("checkpoint_shot{train_shot}.json")),
            &meta.embedding,
            &params,
            scale.gamma,
            ctx.config.train.seed,
        )?;
        for &test_shot in &test_shots {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed);
            let record = evaluate(
                &meta.embedding,
                &params,
                scale.gamma,
                &dataset,
                ctx.config.eval.split.to_split(),
                &meta.learner,
                &meta.solver,
                &ctx.config.eval_episode_config(Some(test_shot)),
                ctx.config.eval.episodes,
                None,
                &mut eval_rng,
            )?;
            println!(
                "train_shot {train_shot} -> test_shot {test_shot}: {:.3} +/- {:.3}",
                record.mean_accuracy, record.ci_halfwidth
            );
            rows.push(ShotSweepRow {
                schema_version: SCHEMA_VERSION,
                train_shot,
                test_shot,
                episodes: record.episodes,
                mean_accuracy: record.mean_accuracy,
                std_accuracy: record.std_accuracy,
                ci_halfwidth: record.ci_halfwidth,
            });
        }
    }
    ctx.write_sweep_csv(&rows)?;
    ctx.write_summary(
        "sweep-shot",
        serde_json::json!({ "rows": serde_json::to_value(&rows)? }),
    )
}

#[derive(Serialize)]
struct QpIterSweepRow {
    schema_version: u32,
    qp_iterations: String,
    episodes: usize,
    mean_accuracy: f64,
    std_accuracy: f64,
    ci_halfwidth: f64,
}

pub fn sweep_qp_iters(ctx: &CommandContext) -> Result<()> {
    if matches!(ctx.config.learner.kind, LearnerKind::NearestClassMean) {
        bail!("sweep-qp-iters needs a QP learner (svm_cs or ridge); nearest_class_mean has no solver iterations");
    }
    let checkpoint = ctx.config.eval.checkpoint.as_ref().context(
        "sweep-qp-iters needs a checkpoint: set eval.checkpoint in the config or pass \
         --set eval.checkpoint=PATH",
    )?;
    let (spec, params, gamma, _) = load_checkpoint(checkpoint)?;
    let dataset = ctx.config.dataset()?;
    let solver = ctx.config.solver.to_config();

    let mut caps = ctx
        .config
        .sweep
        .qp_iteration_caps
        .iter()
        .map(CapSpec::resolve)
        .collect::<Result<Vec<_>>>()?;
    caps.sort_unstable_by_key(|cap| cap.unwrap_or(usize::MAX));
    caps.dedup();
    if caps.is_empty() {
        bail!("sweep.qp_iteration_caps must be nonempty");
    }

    let mut rows = Vec::new();
    for cap in caps {
        let mut learner = ctx.config.learner.to_config()?;
        learner.qp_iteration_cap = cap;
        // Fresh stream per cap: every cap sees the same episodes.
        let mut eval_rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed);
        let record = evaluate(
            &spec,
            &params,
            gamma,
            &dataset,
            ctx.config.eval.split.to_split(),
            &learner,
            &solver,
            &ctx.config.eval_episode_config(None),
            ctx.config.eval.episodes,
            None,
            &mut eval_rng,
        )?;
        println!(
            "qp iterations {}: {:.3} +/- {:.3}",
            cap_label(cap),
            record.mean_accuracy,
            record.ci_halfwidth
        );
        rows.push(QpIterSweepRow {
            schema_version: SCHEMA_VERSION,
            qp_iterations: cap_label(cap),
            episodes: record.episodes,
            mean_accuracy: record.mean_accuracy,
            std_accuracy: record.std_accuracy,
            ci_halfwidth: record.ci_halfwidth,
        });
    }
    ctx.write_sweep_csv(&rows)?;
    ctx.write_summary(
        "sweep-qp-iters",
        serde_json::json!({ "rows": serde_json::to_value(&rows)?, "checkpoint": checkpoint }),
    )
}

#[derive(Serialize)]
struct LearnerRow {
    schema_version: u32,
    learner: String,
    episodes: usize,
    mean_accuracy: f64,
    std_accuracy: f64,
    ci_halfwidth: f64,
    timing_episodes: usize,
    median_solver_ms: f64,
    median_embedding_ms: f64,
}

fn learner_name(kind: &LearnerKind) -> &'static str {
    match kind {
        LearnerKind::SvmCs => "svm_cs",
        LearnerKind::Ridge => "ridge",
        LearnerKind::NearestClassMean => "nearest_class_mean",
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median per-episode wall times, solver (base-learner fit) and embedding
/// (forward passes) measured separately.
fn time_learner(
    ctx: &CommandContext,
    spec: &EmbeddingSpec,
    params: &ParameterStore,
    dataset: &ClassDataset,
    learner: &LearnerConfig,
    episodes: usize,
) -> Result<(f64, f64)> {
    let solver = ctx.config.solver.to_config();
    let episode_config = ctx.config.eval_episode_config(None);
    let split = ctx.config.eval.split.to_split();
    // Offset stream so timing draws are decoupled from the accuracy run.
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed.wrapping_add(1));
    let mut solver_ms = Vec::with_capacity(episodes);
    let mut embed_ms = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let episode = sample_episode(dataset, split, &episode_config, &mut rng)?;
        let embed_start = Instant::now();
        let (support_features, _) = forward(spec, params, &episode.support.features)?;
        let (query_features, _) = forward(spec, params, &episode.query_features)?;
        embed_ms.push(embed_start.elapsed().as_secs_f64() * 1e3);

        let support = SupportSet::new(
            support_features,
            episode.support.labels.clone(),
            episode.support.num_classes,
        )?;
        let fit_start = Instant::now();
        let fitted = fit(&support, learner, &solver)?;
        solver_ms.push(fit_start.elapsed().as_secs_f64() * 1e3);
        let _ = fitted.scores(&query_features)?;
    }
    Ok((median(solver_ms), median(embed_ms)))
}

pub fn compare_learners(ctx: &CommandContext) -> Result<()> {
    let dataset = ctx.config.dataset()?;
    let timing_episodes = ctx.config.sweep.timing_episodes.max(200);
    let arms = [
        LearnerKind::NearestClassMean,
        LearnerKind::Ridge,
        LearnerKind::SvmCs,
    ];

    let mut rows = Vec::new();
    for kind in arms {
        let mut meta = ctx.config.meta_config()?;
        meta.learner.kind = kind.clone();
        // Identical streams per arm; only the learner differs.
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed);
        let (params, scale, _) = meta_train(&meta, &dataset, &mut rng)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(ctx.config.eval.seed);
        let record = evaluate(
            &meta.embedding,
            &params,
            scale.gamma,
            &dataset,
            ctx.config.eval.split.to_split(),
            &meta.learner,
            &meta.solver,
            &ctx.config.eval_episode_config(None),
            ctx.config.eval.episodes,
            None,
            &mut eval_rng,
        )?;
        let (solver_ms, embedding_ms) = time_learner(
            ctx,
            &meta.embedding,
            &params,
            &dataset,
            &meta.learner,
            timing_episodes,
        )?;
        println!(
            "{:<18} accuracy {:.3} +/- {:.3}; per episode: solver {:.3} ms, embedding {:.3} ms",
            learner_name(&kind),
            record.mean_accuracy,
            record.ci_halfwidth,
            solver_ms,
            embedding_ms
        );
        rows.push(LearnerRow {
            schema_version: SCHEMA_VERSION,
            learner: learner_name(&kind).to_string(),
            episodes: record.episodes,
            mean_accuracy: record.mean_accuracy,
            std_accuracy: record.std_accuracy,
            ci_halfwidth: record.ci_halfwidth,
            timing_episodes,
            median_solver_ms: solver_ms,
            median_embedding_ms: embedding_ms,
        });
    }
    rows.sort_by(|a, b| a.learner.cmp(&b.learner));
    ctx.write_sweep_csv(&rows)?;
    ctx.write_summary(
        "compare-learners",
        serde_json::json!({ "rows": serde_json::to_value(&rows)? }),
    )
}

// --- selftest -------------------------------------------------------------

/// Relative error between gradient blocks, treating a pair that both sit
/// below the finite-difference noise floor as agreement rather than 0/0.
fn block_error(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let denom = analytic.norm().max(fd.norm());
    if analytic.is_empty() || denom < 1e-6 {
        return 0.0;
    }
    (analytic - fd).norm() / denom
}

fn vec_error(analytic: &DVector<f64>, fd: &DVector<f64>) -> f64 {
    let denom = analytic.norm().max(fd.norm());
    if analytic.is_empty() || denom < 1e-6 {
        return 0.0;
    }
    (analytic - fd).norm() / denom
}

fn random_support(way: usize, shot: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<SupportSet> {
    let features = DMatrix::from_fn(way * shot, dim, |_, _| rng.gen_range(-1.0..1.0));
    let labels = (0..way * shot).map(|i| i / shot).collect();
    Ok(SupportSet::new(features, labels, way)?)
}

fn suite_qp_vs_active_set() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE55);
    let config = SolverConfig {
        tolerance: 1e-9,
        max_iterations: 100,
        ..SolverConfig::default()
    };
    let trials = 40;
    for trial in 0..trials {
        let m = rng.gen_range(3..=10);
        let p = rng.gen_range(0..=6);
        let r = rng.gen_range(0..=2.min(m - 1));
        let qp = oracle::random_qp(&mut rng, m, p, r);
        let solved = solve(&qp, &config)?;
        let reference = oracle::active_set_solve(&qp)
            .with_context(|| format!("active-set oracle failed on trial {trial}"))?;
        let err = (&solved.z_star - &reference.z_star).amax();
        if err > 1e-6 {
            bail!("trial {trial}: primal mismatch {err:.2e} vs active-set oracle");
        }
    }
    Ok(format!("{trials} random QPs match the active-set oracle to 1e-6"))
}

fn suite_qp_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6EAD);
    let tight = SolverConfig {
        tolerance: 1e-10,
        max_iterations: 100,
        ..SolverConfig::default()
    };
    let trials = 10;
    for trial in 0..trials {
        let m = rng.gen_range(4..=8);
        let p = rng.gen_range(1..=4);
        let r = rng.gen_range(0..=1);
        let (qp, _) = oracle::random_strictly_complementary_qp(&mut rng, m, p, r, 1e-3);
        let solved = solve(&qp, &tight)?;
        let direction = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)).normalize();
        let analytic = backward(&qp, &solved, &direction)?;
        let fd = oracle::finite_difference_gradients(&qp, &direction, 1e-5)?;
        let worst = [
            block_error(&analytic.dp, &fd.dp),
            vec_error(&analytic.dq, &fd.dq),
            block_error(&analytic.dg, &fd.dg),
            vec_error(&analytic.dh, &fd.dh),
            block_error(&analytic.da, &fd.da),
            vec_error(&analytic.db, &fd.db),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        if worst > 1e-4 {
            bail!("trial {trial}: gradient block off by {worst:.2e} vs finite differences");
        }
    }
    Ok(format!(
        "{trials} implicit gradients match finite differences to 1e-4"
    ))
}

fn suite_ridge_closed_form() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x21D6E);
    let solver = SolverConfig::default();
    let trials = 10;
    for trial in 0..trials {
        let support = random_support(rng.gen_range(2..=4), rng.gen_range(1..=3), 6, &mut rng)?;
        let mut learner = LearnerConfig::new(LearnerKind::Ridge);
        learner.qp_iteration_cap = None;
        let fitted = fit(&support, &learner, &solver)?;
        let exact = ridge_closed_form(&support, learner.ridge_lambda)?;
        let alpha = &fitted.duals.as_ref().context("ridge fit returns duals")?.alpha;
        let err = (alpha - &exact).amax();
        if err > 1e-8 {
            bail!("trial {trial}: ridge dual off by {err:.2e} vs closed form");
        }
    }
    Ok(format!("{trials} ridge duals match the closed form to 1e-8"))
}

fn suite_svm_vs_projected_gradient() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57A7);
    let solver = SolverConfig::default();
    let trials = 5;
    for trial in 0..trials {
        let support = random_support(rng.gen_range(2..=3), rng.gen_range(1..=2), 8, &mut rng)?;
        let mut learner = LearnerConfig::new(LearnerKind::SvmCs);
        learner.qp_iteration_cap = None;
        let fitted = fit(&support, &learner, &solver)?;
        let alpha = &fitted.duals.as_ref().context("svm fit returns duals")?.alpha;
        let reference = svm_dual_projected_gradient(&support, learner.svm_c, 300_000, 1e-10)?;
        let gap =
            (svm_dual_objective(&support, alpha) - svm_dual_objective(&support, &reference)).abs();
        if gap > 1e-6 {
            bail!("trial {trial}: svm objective gap {gap:.2e} vs projected gradient");
        }
    }
    Ok(format!(
        "{trials} svm dual objectives within 1e-6 of projected gradient"
    ))
}

fn suite_embedding_gradcheck() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE3BED);
    let spec = EmbeddingSpec::mlp(4, vec![5], 3);
    let params = init_params(&spec, &mut rng);
    let inputs = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
    let weighting = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));

    let loss_of = |p: &ParameterStore| -> Result<f64> {
        let (features, _) = forward(&spec, p, &inputs)?;
        Ok(features.zip_fold(&weighting, 0.0, |acc, f, w| acc + f * w))
    };
    let (_, tape) = forward(&spec, &params, &inputs)?;
    let (grads, _) = vjp(&tape, &weighting)?;

    let h = 1e-6;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut checked = 0usize;
    for name in &names {
        let (rows, cols) = params.get(name).context("named parameter")?.shape();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = params.clone();
                plus.get_mut(name).context("named parameter")?[(r, c)] += h;
                let mut minus = params.clone();
                minus.get_mut(name).context("named parameter")?[(r, c)] -= h;
                let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
                let analytic = grads.get(name).context("gradient present")?[(r, c)];
                let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
                if rel > 1e-5 {
                    bail!("{name}[{r},{c}]: vjp {analytic:.6e} vs fd {fd:.6e}");
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} mlp parameter gradients match finite differences"
    ))
}

fn suite_episode_chain() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4A1);
    let dataset = synthetic_task_distribution(6, 12, 4, 2, 0.4, &mut rng)?;
    let spec = EmbeddingSpec::linear(6, 4);
    let params = init_params(&spec, &mut rng);
    let episode_config = fewshot::episodes::EpisodeConfig {
        way: 2,
        train_shot: 2,
        test_shot: 2,
        query_count: 3,
        seed: 0,
    };
    let episode = sample_episode(&dataset, Split::MetaTrain, &episode_config, &mut rng)?;
    let mut learner = LearnerConfig::new(LearnerKind::Ridge);
    learner.qp_iteration_cap = None;
    let solver = SolverConfig::default();
    let gamma = 1.3;

    let grad = episode_gradients(&spec, &params, gamma, 0.0, &learner, &solver, &episode)?;
    let h = 1e-6;
    let loss_at = |g: f64| -> Result<f64> {
        Ok(episode_gradients(&spec, &params, g, 0.0, &learner, &solver, &episode)?.loss)
    };
    let fd = (loss_at(gamma + h)? - loss_at(gamma - h)?) / (2.0 * h);
    let rel = (grad.gamma_grad - fd).abs() / fd.abs().max(1e-8);
    if rel > 1e-4 {
        bail!("scale gradient {:.6e} vs fd {fd:.6e}", grad.gamma_grad);
    }
    Ok("episode-level scale gradient matches finite differences".to_string())
}

pub fn selftest() -> Result<()> {
    let suites: [(&str, fn() -> Result<String>); 6] = [
        ("qp-vs-active-set-oracle", suite_qp_vs_active_set),
        ("qp-gradients-vs-finite-differences", suite_qp_gradients),
        ("ridge-qp-vs-closed-form", suite_ridge_closed_form),
        ("svm-qp-vs-projected-gradient", suite_svm_vs_projected_gradient),
        ("embedding-vjp-vs-finite-differences", suite_embedding_gradcheck),
        ("episode-chain-gradient", suite_episode_chain),
    ];
    let mut failures = Vec::new();
    for (name, suite) in suites {
        match suite() {
            Ok(detail) => println!("{name}: ok ({detail})"),
            Err(err) => {
                println!("{name}: FAILED ({err:#})");
                failures.push(name);
            }
        }
    }
    if failures.is_empty() {
        println!("selftest: all {} suites passed", 6);
        Ok(())
    } else {
        bail!("selftest failed: {}", failures.join(", "));
    }
}
