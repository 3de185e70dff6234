//! Experiment configuration: a sectioned TOML schema where every key has a
//! default, dotted-key `--set` overrides applied to the parsed tree before
//! deserialization (so overrides get the same type checking as the file),
//! and a short content hash that stamps every artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffqp::SolverConfig;
use fewshot::embedding::{Activation, EmbeddingKind, EmbeddingSpec};
use fewshot::episodes::{
    load_dataset, synthetic_task_distribution, ClassDataset, DatasetFormat, EpisodeConfig, Split,
};
use fewshot::learners::{LearnerConfig, LearnerKind};
use fewshot::meta::MetaConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub learner: LearnerSection,
    pub embedding: EmbeddingSection,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate from the synthetic task distribution below, seeded by `seed`.
    Synthetic,
    /// Load a dataset previously written by `gen-data` from `dir`.
    Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    Csv,
    Idx,
}

impl FormatName {
    pub fn to_format(self) -> DatasetFormat {
        match self {
            FormatName::Csv => DatasetFormat::Csv,
            FormatName::Idx => DatasetFormat::Idx,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset directory; required when `source = "dir"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub format: FormatName,
    pub classes_per_split: usize,
    pub items_per_class: usize,
    pub informative_dim: usize,
    pub noise_dim: usize,
    pub cluster_spread: f64,
    /// Generation seed. Kept separate from the run seeds so sweep arms share
    /// one dataset.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            format: FormatName::Csv,
            classes_per_split: 20,
            items_per_class: 40,
            informative_dim: 16,
            noise_dim: 64,
            cluster_spread: 0.5,
            seed: 7,
        }
    }
}

/// An iteration budget that is either a positive count or the word
/// "converged" (solve to tolerance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapSpec {
    Iterations(u64),
    Word(String),
}

impl CapSpec {
    pub fn resolve(&self) -> Result<Option<usize>> {
        match self {
            CapSpec::Iterations(0) => bail!("qp iteration cap must be at least 1"),
            CapSpec::Iterations(n) => Ok(Some(*n as usize)),
            CapSpec::Word(w) if w == "converged" => Ok(None),
            CapSpec::Word(w) => bail!("unknown qp iteration cap {w:?}; use a count or \"converged\""),
        }
    }
}

pub fn cap_label(cap: Option<usize>) -> String {
    match cap {
        Some(n) => n.to_string(),
        None => "converged".to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub kind: LearnerKind,
    pub svm_c: f64,
    pub ridge_lambda: f64,
    pub qp_iteration_cap: CapSpec,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let base = LearnerConfig::new(LearnerKind::SvmCs);
        Self {
            kind: LearnerKind::SvmCs,
            svm_c: base.svm_c,
            ridge_lambda: base.ridge_lambda,
            qp_iteration_cap: match base.qp_iteration_cap {
                Some(n) => CapSpec::Iterations(n as u64),
                None => CapSpec::Word("converged".to_string()),
            },
        }
    }
}

impl LearnerSection {
    pub fn to_config(&self) -> Result<LearnerConfig> {
        Ok(LearnerConfig {
            kind: self.kind.clone(),
            svm_c: self.svm_c,
            ridge_lambda: self.ridge_lambda,
            qp_iteration_cap: self.qp_iteration_cap.resolve()?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub kind: EmbeddingKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden widths, used by the mlp kind only.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Linear,
            input_dim: 80,
            output_dim: 16,
            hidden: Vec::new(),
            activation: Activation::LeakyRelu,
        }
    }
}

impl EmbeddingSection {
    pub fn to_spec(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            kind: self.kind,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub way: usize,
    pub train_shot: usize,
    pub test_shot: usize,
    pub train_query_count: usize,
    pub eval_query_count: usize,
    pub episodes_per_batch: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Validation episodes per epoch for model selection; 0 keeps the final
    /// iterate.
    pub val_episodes: usize,
    /// (epoch, learning rate) milestones; empty selects the built-in
    /// proportional ladder.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma_init: f64,
    pub label_smoothing_eps: f64,
    /// Seed of the training stream (init, episode order, validation draws).
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            way: 5,
            train_shot: 5,
            test_shot: 5,
            train_query_count: 6,
            eval_query_count: 15,
            episodes_per_batch: 8,
            epochs: 1,
            episodes_per_epoch: 100,
            val_episodes: 40,
            lr_schedule: Vec::new(),
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma_init: 1.0,
            label_smoothing_eps: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl SplitName {
    pub fn to_split(self) -> Split {
        match self {
            SplitName::MetaTrain => Split::MetaTrain,
            SplitName::MetaVal => Split::MetaVal,
            SplitName::MetaTest => Split::MetaTest,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: SplitName,
    pub episodes: usize,
    /// Seed of the evaluation episode stream.
    pub seed: u64,
    /// Checkpoint to evaluate; required by `eval` and `sweep-qp-iters`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: SplitName::MetaTest,
            episodes: 600,
            seed: 2,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub kkt_regularization: f64,
    pub step_fraction: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let base = SolverConfig::default();
        Self {
            max_iterations: base.max_iterations,
            tolerance: base.tolerance,
            kkt_regularization: base.kkt_regularization,
            step_fraction: base.step_fraction,
        }
    }
}

impl SolverSection {
    pub fn to_config(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            kkt_regularization: self.kkt_regularization,
            step_fraction: self.step_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Meta-training shots for `sweep-shot`.
    pub train_shots: Vec<usize>,
    /// Test shots each trained arm is evaluated at.
    pub test_shots: Vec<usize>,
    /// Iteration caps for `sweep-qp-iters`.
    pub qp_iteration_caps: Vec<CapSpec>,
    /// Episodes per arm for the `compare-learners` timing columns; values
    /// below 200 are raised to 200 so medians are stable.
    pub timing_episodes: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            train_shots: vec![1, 5, 10],
            test_shots: vec![1, 5],
            qp_iteration_caps: vec![
                CapSpec::Iterations(1),
                CapSpec::Iterations(2),
                CapSpec::Iterations(3),
                CapSpec::Iterations(5),
                CapSpec::Iterations(10),
                CapSpec::Word("converged".to_string()),
            ],
            timing_episodes: 200,
        }
    }
}

impl ExperimentConfig {
    /// Parse the file (all defaults when absent), apply dotted overrides,
    /// then deserialize and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?,
            None => String::new(),
        };
        let mut tree: toml::Value =
            toml::from_str(&text).context("config file is not valid TOML")?;
        for spec in overrides {
            apply_override(&mut tree, spec)?;
        }
        let config: ExperimentConfig = tree
            .try_into()
            .context("config does not match the experiment schema")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Dir && self.data.dir.is_none() {
            bail!("data.source = \"dir\" requires data.dir");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be at least 1");
        }
        self.meta_config()
            .context("train/learner/embedding/solver sections are inconsistent")?
            .validate()
            .context("train/learner/embedding/solver sections are inconsistent")?;
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        let mut meta = MetaConfig::new(
            self.learner.to_config()?,
            self.embedding.to_spec(),
            self.train.way,
            self.train.train_shot,
            self.train.test_shot,
        );
        meta.train_query_count = self.train.train_query_count;
        meta.eval_query_count = self.train.eval_query_count;
        meta.episodes_per_batch = self.train.episodes_per_batch;
        meta.epochs = self.train.epochs;
        meta.episodes_per_epoch = self.train.episodes_per_epoch;
        meta.val_episodes = self.train.val_episodes;
        meta.lr_schedule = self.train.lr_schedule.clone();
        meta.momentum = self.train.momentum;
        meta.weight_decay = self.train.weight_decay;
        meta.gamma_init = self.train.gamma_init;
        meta.label_smoothing_eps = self.train.label_smoothing_eps;
        meta.solver = self.solver.to_config();
        Ok(meta)
    }

    /// Materialize the dataset this config points at.
    pub fn dataset(&self) -> Result<ClassDataset> {
        match self.data.source {
            DataSource::Synthetic => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.data.seed);
                Ok(synthetic_task_distribution(
                    self.data.classes_per_split,
                    self.data.items_per_class,
                    self.data.informative_dim,
                    self.data.noise_dim,
                    self.data.cluster_spread,
                    &mut rng,
                )?)
            }
            DataSource::Dir => {
                let dir = self
                    .data
                    .dir
                    .as_ref()
                    .context("data.source = \"dir\" requires data.dir")?;
                Ok(load_dataset(dir, self.data.format.to_format())?)
            }
        }
    }

    /// Episode shape used by evaluation commands; `test_shot` overrides the
    /// configured one when given (shot sweeps).
    pub fn eval_episode_config(&self, test_shot: Option<usize>) -> EpisodeConfig {
        EpisodeConfig {
            way: self.train.way,
            train_shot: self.train.train_shot,
            test_shot: test_shot.unwrap_or(self.train.test_shot),
            query_count: self.train.eval_query_count,
            seed: self.eval.seed,
        }
    }
}

/// Apply one `key.path=value` override to the parsed TOML tree. The value is
/// parsed as TOML (numbers, bools, arrays, quoted strings); anything that
/// does not parse is taken as a bare string.
pub fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, rhs) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not of the form key.path=value"))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override key {path:?} has an empty segment");
    }
    let mut node = tree;
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("override {path:?} descends into a non-table value"))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("override {path:?} descends into a non-table value"))?;
    table.insert(segments[segments.len() - 1].to_string(), parse_scalar(rhs));
    Ok(())
}

fn parse_scalar(rhs: &str) -> toml::Value {
    let wrapped = format!("v = {rhs}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("wrapped key exists"),
        Err(_) => toml::Value::String(rhs.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let config = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(config.train.way, 5);
        assert_eq!(config.data.informative_dim, 16);
        assert!(matches!(config.learner.kind, LearnerKind::SvmCs));
        assert_eq!(config.learner.qp_iteration_cap.resolve().unwrap(), Some(3));
    }

    #[test]
    fn overrides_parse_types_and_create_missing_tables() {
        let overrides = vec![
            "train.epochs=30".to_string(),
            "train.lr_schedule=[[0, 0.1], [12, 0.02]]".to_string(),
            "learner.kind=ridge".to_string(),
            "learner.qp_iteration_cap=converged".to_string(),
            "data.cluster_spread=0.25".to_string(),
            "eval.checkpoint=runs/a/checkpoint.json".to_string(),
        ];
        let config = ExperimentConfig::load(None, &overrides).unwrap();
        assert_eq!(config.train.epochs, 30);
        assert_eq!(config.train.lr_schedule, vec![(0, 0.1), (12, 0.02)]);
        assert!(matches!(config.learner.kind, LearnerKind::Ridge));
        assert_eq!(config.learner.qp_iteration_cap.resolve().unwrap(), None);
        assert_eq!(config.data.cluster_spread, 0.25);
        assert_eq!(
            config.eval.checkpoint.as_deref(),
            Some(Path::new("runs/a/checkpoint.json"))
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::load(None, &["train.epoch=3".to_string()]).is_err());
        assert!(ExperimentConfig::load(None, &["learner.kind=bogus".to_string()]).is_err());
        assert!(
            ExperimentConfig::load(None, &["learner.qp_iteration_cap=0".to_string()]).is_err()
        );
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let base = ExperimentConfig::load(None, &[]).unwrap();
        let same = ExperimentConfig::load(None, &[]).unwrap();
        let other =
            ExperimentConfig::load(None, &["train.seed=99".to_string()]).unwrap();
        assert_eq!(base.hash(), same.hash());
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash().len(), 12);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let config =
            ExperimentConfig::load(None, &["train.lr_schedule=[[0, 0.1]]".to_string()]).unwrap();
        let text = toml::to_string_pretty(&config).unwrap();
        let reparsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.hash(), reparsed.hash());
    }
}
