//! End-to-end checks of the training loop: loss gradients against finite
//! differences, batch aggregation, decay bookkeeping, and the statistical
//! behavior of evaluation.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use diffqp::SolverConfig;
use fewshot::embedding::{init_params, EmbeddingSpec};
use fewshot::episodes::{
    sample_episode, synthetic_task_distribution, ClassDataset, EpisodeConfig, Split,
};
use fewshot::learners::{ClassifierWeights, LearnerConfig, LearnerKind};
use fewshot::meta::{
    accuracy_from_scores, episode_gradients, episode_loss, evaluate, meta_train, MetaConfig,
};

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[test]
fn episode_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let (k, d, n_q) = (3, 4, 5);
    let weights = ClassifierWeights {
        weights: random_matrix(k, d, &mut rng),
    };
    let query = random_matrix(n_q, d, &mut rng);
    let labels = vec![0, 2, 1, 0, 2];
    let gamma = 1.7;
    let eps = 0.1;

    let (_, dw, dq, dg) = episode_loss(&weights, &query, &labels, gamma, eps).unwrap();
    let h = 1e-6;
    let loss_at = |w: &DMatrix<f64>, q: &DMatrix<f64>, g: f64| {
        let cw = ClassifierWeights { weights: w.clone() };
        episode_loss(&cw, q, &labels, g, eps).unwrap().0
    };

    for r in 0..k {
        for c in 0..d {
            let mut plus = weights.weights.clone();
            plus[(r, c)] += h;
            let mut minus = weights.weights.clone();
            minus[(r, c)] -= h;
            let numeric = (loss_at(&plus, &query, gamma) - loss_at(&minus, &query, gamma)) / (2.0 * h);
            let denom = numeric.abs().max(dw[(r, c)].abs()).max(1e-10);
            assert!(
                (numeric - dw[(r, c)]).abs() / denom <= 1e-6,
                "dW[{r},{c}]: analytic {} vs numeric {numeric}",
                dw[(r, c)]
            );
        }
    }
    for r in 0..n_q {
        for c in 0..d {
            let mut plus = query.clone();
            plus[(r, c)] += h;
            let mut minus = query.clone();
            minus[(r, c)] -= h;
            let numeric =
                (loss_at(&weights.weights, &plus, gamma) - loss_at(&weights.weights, &minus, gamma))
                    / (2.0 * h);
            let denom = numeric.abs().max(dq[(r, c)].abs()).max(1e-10);
            assert!(
                (numeric - dq[(r, c)]).abs() / denom <= 1e-6,
                "dQ[{r},{c}]: analytic {} vs numeric {numeric}",
                dq[(r, c)]
            );
        }
    }
    let numeric_dg = (loss_at(&weights.weights, &query, gamma + h)
        - loss_at(&weights.weights, &query, gamma - h))
        / (2.0 * h);
    let denom = numeric_dg.abs().max(dg.abs()).max(1e-10);
    assert!(
        (numeric_dg - dg).abs() / denom <= 1e-6,
        "dgamma: analytic {dg} vs numeric {numeric_dg}"
    );
}

fn small_dataset(seed: u64) -> ClassDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthetic_task_distribution(8, 16, 4, 2, 0.4, &mut rng).unwrap()
}

#[test]
fn full_chain_embedding_gradient_matches_finite_differences() {
    // The complete pipeline differentiated: loss -> scores -> classifier fit
    // -> embedded support -> embedding parameters. Checked for both QP
    // learners at full convergence on a frozen episode.
    let dataset = small_dataset(209);
    let spec = EmbeddingSpec::mlp(6, vec![5], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(230);
    let params = init_params(&spec, &mut rng);
    let episode_cfg = EpisodeConfig {
        way: 2,
        train_shot: 1,
        test_shot: 1,
        query_count: 3,
        seed: 0,
    };
    let episode = sample_episode(&dataset, Split::MetaTrain, &episode_cfg, &mut rng).unwrap();
    let gamma = 1.2;
    let solver = SolverConfig::default();

    for kind in [LearnerKind::Ridge, LearnerKind::SvmCs] {
        let mut learner = LearnerConfig::new(kind);
        learner.qp_iteration_cap = None;
        let grad = episode_gradients(&spec, &params, gamma, 0.0, &learner, &solver, &episode)
            .unwrap();

        let loss_at = |p: &fewshot::embedding::ParameterStore| {
            episode_gradients(&spec, p, gamma, 0.0, &learner, &solver, &episode)
                .unwrap()
                .loss
        };
        let h = 1e-5;
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let mut worst: f64 = 0.0;
        for name in &names {
            let shape = params.get(name).unwrap().shape();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = params.clone();
                    plus.get_mut(name).unwrap()[(r, c)] += h;
                    let mut minus = params.clone();
                    minus.get_mut(name).unwrap()[(r, c)] -= h;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let analytic = grad.param_grads.get(name).unwrap()[(r, c)];
                    let denom = numeric.abs().max(analytic.abs());
                    if denom < 1e-7 {
                        continue;
                    }
                    let rel = (numeric - analytic).abs() / denom;
                    worst = worst.max(rel);
                    assert!(
                        rel <= 1e-3,
                        "{kind:?} {name}[{r},{c}]: analytic {analytic} vs numeric {numeric}, rel {rel}"
                    );
                }
            }
        }
        assert!(worst > 0.0, "{kind:?}: degenerate check, nothing compared");
    }
}

#[test]
fn one_batch_step_applies_the_mean_of_episode_gradients() {
    let dataset = small_dataset(210);
    let mut config = MetaConfig::new(
        LearnerConfig::new(LearnerKind::Ridge),
        EmbeddingSpec::linear(6, 4),
        3,
        2,
        2,
    );
    config.epochs = 1;
    config.episodes_per_epoch = 8;
    config.episodes_per_batch = 8;
    config.val_episodes = 0;
    config.momentum = 0.0;
    config.weight_decay = 0.0;
    config.lr_schedule = vec![(0, 0.05)];

    // Replay the trainer's seed drawing to rebuild its exact inputs.
    let run_seed = 31u64;
    let mut probe = ChaCha8Rng::seed_from_u64(run_seed);
    let init_seed = probe.next_u64();
    let episode_seed = probe.next_u64();
    let _val_seed = probe.next_u64();
    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    let init = init_params(&config.embedding, &mut init_rng);
    let episode_cfg = EpisodeConfig {
        way: 3,
        train_shot: 2,
        test_shot: 2,
        query_count: config.train_query_count,
        seed: 0,
    };
    let mut episode_rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let mut grad_mean = init.zeros_like();
    let mut gamma_grad_mean = 0.0;
    for _ in 0..8 {
        let ep = sample_episode(&dataset, Split::MetaTrain, &episode_cfg, &mut episode_rng).unwrap();
        let g = episode_gradients(
            &config.embedding,
            &init,
            config.gamma_init,
            0.0,
            &config.learner,
            &config.solver,
            &ep,
        )
        .unwrap();
        grad_mean.axpy(1.0, &g.param_grads);
        gamma_grad_mean += g.gamma_grad;
    }
    grad_mean.scale(1.0 / 8.0);
    gamma_grad_mean /= 8.0;

    let (trained, scale, _) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(run_seed)).unwrap();

    // Without momentum or decay one step is exactly theta - lr * mean grad.
    for (name, m) in init.iter() {
        let expected = m + grad_mean.get(name).unwrap() * (-0.05);
        let got = trained.get(name).unwrap();
        assert_eq!(got, &expected, "parameter {name} deviates from the mean-gradient step");
    }
    let expected_gamma = config.gamma_init - 0.05 * gamma_grad_mean;
    assert_eq!(scale.gamma.to_bits(), expected_gamma.to_bits());
}

#[test]
fn splitting_a_batch_changes_nothing_when_updates_are_null() {
    let dataset = small_dataset(211);
    let mut config = MetaConfig::new(
        LearnerConfig::new(LearnerKind::NearestClassMean),
        EmbeddingSpec::linear(6, 4),
        3,
        1,
        1,
    );
    config.epochs = 1;
    config.episodes_per_epoch = 8;
    config.val_episodes = 0;
    config.lr_schedule = vec![(0, 0.0)];

    config.episodes_per_batch = 8;
    let (whole, _, _) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    config.episodes_per_batch = 2;
    let (pieces, _, _) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (name, m) in whole.iter() {
        assert_eq!(pieces.get(name).unwrap(), m);
    }
}

#[test]
fn weight_decay_never_touches_gamma() {
    let dataset = small_dataset(212);
    let mut config = MetaConfig::new(
        LearnerConfig::new(LearnerKind::Ridge),
        EmbeddingSpec::linear(6, 4),
        3,
        2,
        2,
    );
    config.epochs = 1;
    config.episodes_per_epoch = 8;
    config.episodes_per_batch = 8;
    config.val_episodes = 0;
    config.momentum = 0.0;
    config.lr_schedule = vec![(0, 0.05)];

    // One identical step under wildly different decay: gamma must agree
    // bitwise, the embedding must not.
    config.weight_decay = 0.0;
    let (params_plain, scale_plain, _) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    config.weight_decay = 0.9;
    let (params_decayed, scale_decayed, _) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

    assert_eq!(scale_plain.gamma.to_bits(), scale_decayed.gamma.to_bits());
    let moved = params_plain
        .iter()
        .any(|(name, m)| params_decayed.get(name).unwrap() != m);
    assert!(moved, "heavy decay left the embedding untouched");
}

#[test]
fn meta_training_beats_the_untrained_baseline_by_ten_points() {
    // Informative structure in 16 of 80 dims; a linear map must learn to
    // keep signal and drop noise.
    let mut data_rng = ChaCha8Rng::seed_from_u64(213);
    let dataset = synthetic_task_distribution(20, 40, 16, 64, 0.5, &mut data_rng).unwrap();

    let mut config = MetaConfig::new(
        LearnerConfig::new(LearnerKind::SvmCs),
        EmbeddingSpec::linear(80, 16),
        5,
        5,
        5,
    );
    config.epochs = 15;
    config.episodes_per_epoch = 120;
    config.episodes_per_batch = 8;
    config.val_episodes = 40;
    config.train_query_count = 5;
    config.eval_query_count = 5;
    config.lr_schedule = vec![(0, 0.1), (12, 0.02)];

    let mut baseline_cfg = config.clone();
    baseline_cfg.epochs = 0;
    baseline_cfg.val_episodes = 0;

    let (trained, scale_t, metrics_t) =
        meta_train(&config, &dataset, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(metrics_t.train_loss.len(), 15);
    assert!(
        metrics_t.train_loss[14] < metrics_t.train_loss[0] - 0.5,
        "train loss barely moved: {:?}",
        metrics_t.train_loss
    );
    let (untrained, scale_0, _) =
        meta_train(&baseline_cfg, &dataset, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();

    let eval_cfg = EpisodeConfig {
        way: 5,
        train_shot: 5,
        test_shot: 5,
        query_count: 5,
        seed: 0,
    };
    let solver = SolverConfig::default();
    let learner = LearnerConfig::new(LearnerKind::SvmCs);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(90);
    let after = evaluate(
        &config.embedding,
        &trained,
        scale_t.gamma,
        &dataset,
        Split::MetaTest,
        &learner,
        &solver,
        &eval_cfg,
        300,
        None,
        &mut eval_rng,
    )
    .unwrap();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(90);
    let before = evaluate(
        &config.embedding,
        &untrained,
        scale_0.gamma,
        &dataset,
        Split::MetaTest,
        &learner,
        &solver,
        &eval_cfg,
        300,
        None,
        &mut eval_rng,
    )
    .unwrap();

    eprintln!(
        "meta-test accuracy {:.3} -> {:.3}",
        before.mean_accuracy, after.mean_accuracy
    );
    assert!(
        after.mean_accuracy - before.mean_accuracy >= 0.10,
        "training gained only {:.1} points ({:.3} -> {:.3})",
        (after.mean_accuracy - before.mean_accuracy) * 100.0,
        before.mean_accuracy,
        after.mean_accuracy
    );
}

#[test]
fn permuted_labels_score_at_chance() {
    let dataset = small_dataset(214);
    let mut rng = ChaCha8Rng::seed_from_u64(215);
    let learner = LearnerConfig::new(LearnerKind::Ridge);
    let solver = SolverConfig::default();
    let episode_cfg = EpisodeConfig {
        way: 4,
        train_shot: 2,
        test_shot: 2,
        query_count: 3,
        seed: 0,
    };

    // Relabel each episode's support classes by a uniform random permutation
    // before fitting. The fitted classifier then predicts a permuted class
    // for each query, and grading against the true labels is correct with
    // probability exactly 1/K.
    let episodes = 200;
    let mut accs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = sample_episode(&dataset, Split::MetaTest, &episode_cfg, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..4).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let permuted_labels: Vec<usize> = ep.support.labels.iter().map(|&l| perm[l]).collect();
        let permuted_support = fewshot::learners::SupportSet::new(
            ep.support.features.clone(),
            permuted_labels,
            4,
        )
        .unwrap();
        let fit_result = fewshot::learners::fit(&permuted_support, &learner, &solver).unwrap();
        let scores = fit_result.scores(&ep.query_features).unwrap();
        accs.push(accuracy_from_scores(&scores, &ep.query_labels, 1.0));
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let ci = 1.96 * std / n.sqrt();
    assert!(
        (mean - 0.25).abs() <= 3.0 * ci.max(0.01),
        "permuted-label accuracy {mean:.3} strays from chance 0.25 (ci {ci:.3})"
    );
}

#[test]
fn ci_halfwidth_shrinks_with_the_square_root_of_episodes() {
    let dataset = small_dataset(216);
    let spec = EmbeddingSpec::identity(6);
    let mut rng = ChaCha8Rng::seed_from_u64(217);
    let params = init_params(&spec, &mut rng);
    let learner = LearnerConfig::new(LearnerKind::NearestClassMean);
    let solver = SolverConfig::default();
    let episode_cfg = EpisodeConfig {
        way: 4,
        train_shot: 1,
        test_shot: 1,
        query_count: 3,
        seed: 0,
    };

    let mut rng_small = ChaCha8Rng::seed_from_u64(218);
    let small = evaluate(
        &spec, &params, 1.0, &dataset, Split::MetaTest, &learner, &solver, &episode_cfg,
        250, None, &mut rng_small,
    )
    .unwrap();
    let mut rng_large = ChaCha8Rng::seed_from_u64(218);
    let large = evaluate(
        &spec, &params, 1.0, &dataset, Split::MetaTest, &learner, &solver, &episode_cfg,
        1000, None, &mut rng_large,
    )
    .unwrap();

    assert_eq!(small.episodes, 250);
    assert_eq!(large.episodes, 1000);
    let ratio = small.ci_halfwidth / large.ci_halfwidth;
    assert!(
        (1.6..=2.5).contains(&ratio),
        "CI ratio {ratio:.2} far from the expected 2.0"
    );
}
