//! The episodic training loop: scaled-softmax query loss, Nesterov-momentum
//! SGD over the embedding and the scale parameter, piecewise-constant
//! learning-rate schedules, validation-based model selection, and
//! confidence-interval evaluation.
//!
//! Gradients flow loss -> classifier weights -> dual solution -> support
//! features -> embedding parameters, so the base learner's fit sits inside
//! the differentiated graph rather than beside it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use diffqp::SolverConfig;

use crate::embedding::{forward, init_params, vjp, EmbeddingSpec, ParameterStore};
use crate::episodes::{sample_episode, ClassDataset, Episode, EpisodeConfig, Split};
use crate::error::FewshotError;
use crate::learners::{
    backward_to_support, fit, ClassifierWeights, LearnerConfig, LearnerKind, SupportSet,
};

/// Softmax temperature applied to classifier scores; learned jointly with
/// the embedding.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleParameter {
    pub gamma: f64,
}

/// A trained (or freshly initialized) model: embedding shape, its
/// parameters, and the score scale. Matches what checkpoints store.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: EmbeddingSpec,
    pub params: ParameterStore,
    pub gamma: f64,
}

/// Hyperparameters for one meta-training run.
///
/// `lr_schedule` is piecewise constant: `(start_epoch, lr)` pairs, first
/// entry at epoch 0. Leave it empty to get the default decay ladder
/// 0.1 / 0.006 / 0.0012 / 0.00024 switching at 1/3, 2/3, and 5/6 of the
/// epoch budget.
#[derive(Debug, Clone)]
pub struct MetaConfig {
    pub learner: LearnerConfig,
    pub embedding: EmbeddingSpec,
    pub way: usize,
    pub train_shot: usize,
    pub test_shot: usize,
    pub train_query_count: usize,
    pub eval_query_count: usize,
    pub episodes_per_batch: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Validation episodes per epoch for model selection; 0 disables
    /// selection and keeps the final iterate.
    pub val_episodes: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma_init: f64,
    pub label_smoothing_eps: f64,
    pub solver: SolverConfig,
}

impl MetaConfig {
    pub fn new(
        learner: LearnerConfig,
        embedding: EmbeddingSpec,
        way: usize,
        train_shot: usize,
        test_shot: usize,
    ) -> Self {
        Self {
            learner,
            embedding,
            way,
            train_shot,
            test_shot,
            train_query_count: 6,
            eval_query_count: 15,
            episodes_per_batch: 8,
            epochs: 1,
            episodes_per_epoch: 100,
            val_episodes: 200,
            lr_schedule: Vec::new(),
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma_init: 1.0,
            label_smoothing_eps: 0.0,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), FewshotError> {
        self.learner.validate()?;
        self.embedding.validate()?;
        self.train_episode_config().validate()?;
        if self.eval_query_count == 0 {
            return Err(FewshotError::InvalidConfig(
                "eval_query_count must be at least 1".into(),
            ));
        }
        if self.episodes_per_batch == 0 {
            return Err(FewshotError::InvalidConfig(
                "episodes_per_batch must be at least 1".into(),
            ));
        }
        if self.epochs > 0 && self.episodes_per_epoch == 0 {
            return Err(FewshotError::InvalidConfig(
                "episodes_per_epoch must be at least 1 when training".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FewshotError::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(0.0..0.5).contains(&self.label_smoothing_eps) {
            return Err(FewshotError::InvalidConfig(format!(
                "label_smoothing_eps must lie in [0,0.5), got {}",
                self.label_smoothing_eps
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(FewshotError::InvalidConfig(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !self.gamma_init.is_finite() {
            return Err(FewshotError::InvalidConfig("gamma_init must be finite".into()));
        }
        if !self.lr_schedule.is_empty() {
            if self.lr_schedule[0].0 != 0 {
                return Err(FewshotError::InvalidConfig(
                    "lr_schedule must start at epoch 0".into(),
                ));
            }
            for pair in self.lr_schedule.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(FewshotError::InvalidConfig(
                        "lr_schedule epochs must be strictly increasing".into(),
                    ));
                }
            }
            for &(_, lr) in &self.lr_schedule {
                if !(lr >= 0.0) || !lr.is_finite() {
                    return Err(FewshotError::InvalidConfig(format!(
                        "learning rates must be finite and nonnegative, got {lr}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn train_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            train_shot: self.train_shot,
            test_shot: self.test_shot,
            query_count: self.train_query_count,
            seed: 0,
        }
    }

    fn eval_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            train_shot: self.train_shot,
            test_shot: self.test_shot,
            query_count: self.eval_query_count,
            seed: 0,
        }
    }

    /// Schedule with the default ladder substituted when none was given.
    /// Collisions from integer division on short runs keep the earliest
    /// (largest) rate.
    pub fn resolved_schedule(&self) -> Vec<(usize, f64)> {
        let raw = if self.lr_schedule.is_empty() {
            vec![
                (0, 0.1),
                (self.epochs / 3, 0.006),
                (2 * self.epochs / 3, 0.0012),
                (5 * self.epochs / 6, 0.00024),
            ]
        } else {
            self.lr_schedule.clone()
        };
        let mut resolved: Vec<(usize, f64)> = Vec::new();
        for (epoch, lr) in raw {
            if resolved.last().map_or(true, |&(e, _)| epoch > e) {
                resolved.push((epoch, lr));
            }
        }
        resolved
    }
}

fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|&&(start, _)| start <= epoch)
        .last()
        .map(|&(_, lr)| lr)
        .expect("resolved schedules always cover epoch 0")
}

/// One evaluation outcome: accuracy statistics over a set of sampled
/// episodes, tagged with where and when it was measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub epoch: Option<usize>,
    pub way: usize,
    pub shot: usize,
    pub query_count: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub ci_halfwidth: f64,
}

/// Everything a run reports: mean training loss per epoch and one record
/// per evaluation pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub train_loss: Vec<f64>,
    pub evaluations: Vec<EvalRecord>,
}

fn smoothed_target(way: usize, label: usize, class: usize, eps: f64) -> f64 {
    if class == label {
        1.0 - eps
    } else {
        eps / (way as f64 - 1.0)
    }
}

/// Mean negative log-likelihood of a softmax over `gamma`-scaled scores,
/// with optional label smoothing. Returns `(loss, dL/dscores, dL/dgamma)`.
pub fn softmax_loss_from_scores(
    scores: &DMatrix<f64>,
    labels: &[usize],
    gamma: f64,
    eps: f64,
) -> Result<(f64, DMatrix<f64>, f64), FewshotError> {
    let (n, k) = scores.shape();
    if labels.len() != n {
        return Err(FewshotError::DimensionMismatch(format!(
            "{n} score rows but {} labels",
            labels.len()
        )));
    }
    if k < 2 {
        return Err(FewshotError::DimensionMismatch(
            "scores need at least two classes".into(),
        ));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(FewshotError::DimensionMismatch(format!(
            "label out of range for {k} classes"
        )));
    }
    if scores.iter().any(|v| v.is_nan()) || gamma.is_nan() {
        return Err(FewshotError::NonFiniteScores);
    }

    let mut loss = 0.0;
    let mut dl_dscores = DMatrix::zeros(n, k);
    let mut dl_dgamma = 0.0;
    for i in 0..n {
        let m = (0..k).map(|c| gamma * scores[(i, c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..k {
            total += (gamma * scores[(i, c)] - m).exp();
        }
        let lse = m + total.ln();
        let mut target_dot = 0.0;
        for c in 0..k {
            let t = smoothed_target(k, labels[i], c, eps);
            target_dot += t * gamma * scores[(i, c)];
            let p = (gamma * scores[(i, c)] - m).exp() / total;
            dl_dscores[(i, c)] = gamma * (p - t);
            dl_dgamma += (p - t) * scores[(i, c)];
        }
        loss += lse - target_dot;
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    dl_dscores *= inv_n;
    dl_dgamma *= inv_n;
    Ok((loss, dl_dscores, dl_dgamma))
}

/// Query loss for a linear classifier: scores are `Q W'`, then the scaled
/// softmax. Returns `(loss, dL/dweights, dL/dquery, dL/dgamma)`.
pub fn episode_loss(
    weights: &ClassifierWeights,
    query_features: &DMatrix<f64>,
    query_labels: &[usize],
    gamma: f64,
    eps: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>, f64), FewshotError> {
    if query_features.ncols() != weights.weights.ncols() {
        return Err(FewshotError::DimensionMismatch(format!(
            "queries have dim {} but weights have dim {}",
            query_features.ncols(),
            weights.weights.ncols()
        )));
    }
    let scores = query_features * weights.weights.transpose();
    let (loss, dl_dscores, dl_dgamma) =
        softmax_loss_from_scores(&scores, query_labels, gamma, eps)?;
    let dl_dweights = dl_dscores.transpose() * query_features;
    let dl_dquery = &dl_dscores * &weights.weights;
    Ok((loss, dl_dweights, dl_dquery, dl_dgamma))
}

/// Fraction of rows whose gamma-scaled argmax matches the label. Ties go to
/// the lowest class index.
pub fn accuracy_from_scores(scores: &DMatrix<f64>, labels: &[usize], gamma: f64) -> f64 {
    let n = scores.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        let mut best_score = gamma * scores[(i, 0)];
        for c in 1..scores.ncols() {
            let s = gamma * scores[(i, c)];
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Loss and gradients from one episode's full differentiated pipeline.
#[derive(Debug, Clone)]
pub struct EpisodeGrad {
    pub loss: f64,
    pub param_grads: ParameterStore,
    pub gamma_grad: f64,
}

/// Full differentiated pipeline for one episode: embed support and query in
/// one forward pass, fit the base learner on embedded support, take the
/// scaled-softmax query loss, and pull gradients back through the fit (via
/// the dual solution for QP learners, via prototype linearity for NCM) and
/// the embedding.
pub fn episode_gradients(
    spec: &EmbeddingSpec,
    params: &ParameterStore,
    gamma: f64,
    eps: f64,
    learner: &LearnerConfig,
    solver: &SolverConfig,
    episode: &Episode,
) -> Result<EpisodeGrad, FewshotError> {
    let n_s = episode.support.num_samples();
    let n_q = episode.query_features.nrows();
    let dim = episode.support.feature_dim();
    let mut stacked = DMatrix::zeros(n_s + n_q, dim);
    stacked.rows_mut(0, n_s).copy_from(&episode.support.features);
    stacked.rows_mut(n_s, n_q).copy_from(&episode.query_features);

    let (features, tape) = forward(spec, params, &stacked)?;
    let out_dim = features.ncols();
    let emb_support = features.rows(0, n_s).into_owned();
    let emb_query = features.rows(n_s, n_q).into_owned();
    let support_set = SupportSet::new(
        emb_support,
        episode.support.labels.clone(),
        episode.support.num_classes,
    )?;

    let fit_result = fit(&support_set, learner, solver)?;
    let scores = fit_result.scores(&emb_query)?;
    let (loss, dl_dscores, dl_dgamma) =
        softmax_loss_from_scores(&scores, &episode.query_labels, gamma, eps)?;

    let (dl_dsupport, dl_dquery) = match fit_result.kind {
        LearnerKind::NearestClassMean => {
            let prototypes = fit_result
                .prototypes
                .as_ref()
                .expect("NCM fits always carry prototypes");
            prototypes.backward(&support_set, &emb_query, &dl_dscores)?
        }
        _ => {
            let dl_dweights = dl_dscores.transpose() * &emb_query;
            let dl_dquery = &dl_dscores * &fit_result.weights.weights;
            let dl_dsupport = backward_to_support(&fit_result, &dl_dweights, &support_set)?;
            (dl_dsupport, dl_dquery)
        }
    };

    let mut dl_dfeatures = DMatrix::zeros(n_s + n_q, out_dim);
    dl_dfeatures.rows_mut(0, n_s).copy_from(&dl_dsupport);
    dl_dfeatures.rows_mut(n_s, n_q).copy_from(&dl_dquery);
    let (param_grads, _dl_dinput) = vjp(&tape, &dl_dfeatures)?;

    Ok(EpisodeGrad {
        loss,
        param_grads,
        gamma_grad: dl_dgamma,
    })
}

struct SgdState {
    velocity: ParameterStore,
    gamma_velocity: f64,
}

/// Nesterov-momentum SGD update: with g the decayed gradient,
/// `buf = mu*buf + g` then `theta -= lr*(g + mu*buf)`. Weight decay touches
/// the embedding parameters only, never gamma.
fn sgd_step(
    params: &mut ParameterStore,
    gamma: &mut f64,
    state: &mut SgdState,
    grads: &ParameterStore,
    gamma_grad: f64,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let mut decayed = grads.clone();
    decayed.axpy(weight_decay, params);
    state.velocity.scale(momentum);
    state.velocity.axpy(1.0, &decayed);
    params.axpy(-lr, &decayed);
    params.axpy(-lr * momentum, &state.velocity);

    state.gamma_velocity = momentum * state.gamma_velocity + gamma_grad;
    *gamma -= lr * (gamma_grad + momentum * state.gamma_velocity);
}

/// Meta-train an embedding + scale on the meta-train split.
///
/// Three stream seeds are drawn from `rng` up front (initialization,
/// training episodes, validation episodes), so the run is a pure function
/// of `(config, dataset, rng state)`. Validation reuses the same episode
/// stream every epoch, which makes per-epoch accuracies comparable; the
/// returned parameters are the earliest strictly-best validation iterate,
/// or the final iterate when `val_episodes` is 0.
pub fn meta_train<R: Rng + ?Sized>(
    config: &MetaConfig,
    dataset: &ClassDataset,
    rng: &mut R,
) -> Result<(ParameterStore, ScaleParameter, RunMetrics), FewshotError> {
    config.validate()?;
    let init_seed = rng.next_u64();
    let episode_seed = rng.next_u64();
    let val_seed = rng.next_u64();

    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = init_params(&config.embedding, &mut init_rng);
    let mut gamma = config.gamma_init;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(episode_seed);

    let schedule = config.resolved_schedule();
    let mut state = SgdState {
        velocity: params.zeros_like(),
        gamma_velocity: 0.0,
    };
    let mut metrics = RunMetrics::default();
    let mut best: Option<(f64, ParameterStore, f64)> = None;
    let train_cfg = config.train_episode_config();

    for epoch in 0..config.epochs {
        let lr = lr_at(&schedule, epoch);
        let mut epoch_loss = 0.0;
        let mut remaining = config.episodes_per_epoch;
        let mut batch_index = 0usize;
        while remaining > 0 {
            let batch_size = remaining.min(config.episodes_per_batch);
            remaining -= batch_size;
            let episodes: Vec<Episode> = (0..batch_size)
                .map(|_| sample_episode(dataset, Split::MetaTrain, &train_cfg, &mut episode_rng))
                .collect::<Result<_, _>>()?;

            let results: Vec<Result<EpisodeGrad, FewshotError>> = episodes
                .par_iter()
                .map(|ep| {
                    episode_gradients(
                        &config.embedding,
                        &params,
                        gamma,
                        config.label_smoothing_eps,
                        &config.learner,
                        &config.solver,
                        ep,
                    )
                })
                .collect();

            // Reduction stays in episode order so results do not depend on
            // the worker count.
            let mut grad_sum = params.zeros_like();
            let mut gamma_sum = 0.0;
            let mut loss_sum = 0.0;
            for result in results {
                let g = result?;
                if !g.loss.is_finite() || !g.gamma_grad.is_finite() || !g.param_grads.all_finite()
                {
                    return Err(FewshotError::NonFiniteLoss {
                        epoch,
                        batch: batch_index,
                        detail: format!(
                            "episode loss {}, gamma {gamma}, gamma grad {}",
                            g.loss, g.gamma_grad
                        ),
                    });
                }
                grad_sum.axpy(1.0, &g.param_grads);
                gamma_sum += g.gamma_grad;
                loss_sum += g.loss;
            }
            let inv = 1.0 / batch_size as f64;
            grad_sum.scale(inv);
            sgd_step(
                &mut params,
                &mut gamma,
                &mut state,
                &grad_sum,
                gamma_sum * inv,
                lr,
                config.momentum,
                config.weight_decay,
            );
            if !gamma.is_finite() || !params.all_finite() {
                return Err(FewshotError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    detail: format!("parameters left the finite range, gamma {gamma}"),
                });
            }
            epoch_loss += loss_sum;
            batch_index += 1;
        }
        metrics
            .train_loss
            .push(epoch_loss / config.episodes_per_epoch as f64);

        if config.val_episodes > 0 {
            let mut val_rng = ChaCha8Rng::seed_from_u64(val_seed);
            let record = evaluate(
                &config.embedding,
                &params,
                gamma,
                dataset,
                Split::MetaVal,
                &config.learner,
                &config.solver,
                &config.eval_episode_config(),
                config.val_episodes,
                Some(epoch),
                &mut val_rng,
            )?;
            let is_better = best
                .as_ref()
                .map_or(true, |(b, _, _)| record.mean_accuracy > *b);
            if is_better {
                best = Some((record.mean_accuracy, params.clone(), gamma));
            }
            metrics.evaluations.push(record);
        }
    }

    if let Some((_, best_params, best_gamma)) = best {
        params = best_params;
        gamma = best_gamma;
    }
    Ok((params, ScaleParameter { gamma }, metrics))
}

/// Sample `num_episodes` episodes from `split`, fit the learner on each
/// embedded support set, and report mean query accuracy with a 95% CI
/// halfwidth `1.96*std/sqrt(n)` (std uses the n-1 denominator).
pub fn evaluate<R: Rng + ?Sized>(
    spec: &EmbeddingSpec,
    params: &ParameterStore,
    gamma: f64,
    dataset: &ClassDataset,
    split: Split,
    learner: &LearnerConfig,
    solver: &SolverConfig,
    episode_config: &EpisodeConfig,
    num_episodes: usize,
    epoch: Option<usize>,
    rng: &mut R,
) -> Result<EvalRecord, FewshotError> {
    if num_episodes == 0 {
        return Err(FewshotError::InvalidConfig(
            "evaluation needs at least one episode".into(),
        ));
    }
    let episodes: Vec<Episode> = (0..num_episodes)
        .map(|_| sample_episode(dataset, split, episode_config, rng))
        .collect::<Result<_, _>>()?;

    let accuracies: Vec<f64> = episodes
        .par_iter()
        .map(|ep| -> Result<f64, FewshotError> {
            let n_s = ep.support.num_samples();
            let n_q = ep.query_features.nrows();
            let dim = ep.support.feature_dim();
            let mut stacked = DMatrix::zeros(n_s + n_q, dim);
            stacked.rows_mut(0, n_s).copy_from(&ep.support.features);
            stacked.rows_mut(n_s, n_q).copy_from(&ep.query_features);
            let (features, _tape) = forward(spec, params, &stacked)?;
            let support_set = SupportSet::new(
                features.rows(0, n_s).into_owned(),
                ep.support.labels.clone(),
                ep.support.num_classes,
            )?;
            let fit_result = fit(&support_set, learner, solver)?;
            let scores = fit_result.scores(&features.rows(n_s, n_q).into_owned())?;
            Ok(accuracy_from_scores(&scores, &ep.query_labels, gamma))
        })
        .collect::<Result<_, _>>()?;

    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let variance = if accuracies.len() > 1 {
        accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = variance.sqrt();
    let shot = match split {
        Split::MetaTrain => episode_config.train_shot,
        _ => episode_config.test_shot,
    };
    Ok(EvalRecord {
        split: split.as_str().to_string(),
        epoch,
        way: episode_config.way,
        shot,
        query_count: episode_config.query_count,
        episodes: num_episodes,
        mean_accuracy: mean,
        std_accuracy: std,
        ci_halfwidth: 1.96 * std / n.sqrt(),
    })
}
