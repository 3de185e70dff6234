//! Datasets with class-disjoint splits, the K-way N-shot episode sampler,
//! a synthetic Gaussian task distribution, and plain on-disk formats.
//!
//! Episodes draw K distinct classes and then N+Q distinct items per class,
//! so support and query never share an item. Local labels are the order in
//! which classes were sampled, which keeps global class identity out of the
//! embedding's reach.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::FewshotError;
use crate::learners::SupportSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::MetaTrain => "meta_train",
            Split::MetaVal => "meta_val",
            Split::MetaTest => "meta_test",
        }
    }

    fn index(&self) -> usize {
        match self {
            Split::MetaTrain => 0,
            Split::MetaVal => 1,
            Split::MetaTest => 2,
        }
    }
}

/// Items grouped by class plus a class-disjoint split assignment.
///
/// Class ids are dense indices `0..num_classes`; `items[c]` holds one row
/// per example of class `c`. A class may be absent from every split, but
/// never present in two.
#[derive(Debug, Clone)]
pub struct ClassDataset {
    items: Vec<DMatrix<f64>>,
    splits: [Vec<usize>; 3],
}

impl ClassDataset {
    pub fn new(items: Vec<DMatrix<f64>>, splits: [Vec<usize>; 3]) -> Result<Self, FewshotError> {
        if items.is_empty() {
            return Err(FewshotError::InvalidConfig(
                "dataset needs at least one class".into(),
            ));
        }
        let dim = items[0].ncols();
        for (c, m) in items.iter().enumerate() {
            if m.ncols() != dim {
                return Err(FewshotError::DimensionMismatch(format!(
                    "class {c} has dim {} but class 0 has dim {dim}",
                    m.ncols()
                )));
            }
            if m.nrows() == 0 {
                return Err(FewshotError::InvalidConfig(format!(
                    "class {c} has no items"
                )));
            }
        }
        let mut seen = vec![false; items.len()];
        for split in &splits {
            for &class in split {
                if class >= items.len() {
                    return Err(FewshotError::InvalidConfig(format!(
                        "split references class {class} but the dataset has {} classes",
                        items.len()
                    )));
                }
                if seen[class] {
                    return Err(FewshotError::SplitOverlap { class });
                }
                seen[class] = true;
            }
        }
        Ok(Self { items, splits })
    }

    pub fn feature_dim(&self) -> usize {
        self.items[0].ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.items.len()
    }

    pub fn classes_in(&self, split: Split) -> &[usize] {
        &self.splits[split.index()]
    }

    pub fn items_of(&self, class: usize) -> &DMatrix<f64> {
        &self.items[class]
    }

    /// Smallest per-class item count within a split, or `None` if empty.
    pub fn min_items_in(&self, split: Split) -> Option<usize> {
        self.classes_in(split)
            .iter()
            .map(|&c| self.items[c].nrows())
            .min()
    }
}

/// Episode shape: K-way, with separate shot counts for meta-training and
/// evaluation phases and Q query items per class. `seed` is the base for
/// per-worker sampling streams.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub way: usize,
    pub train_shot: usize,
    pub test_shot: usize,
    pub query_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), FewshotError> {
        if self.way < 2 {
            return Err(FewshotError::InvalidConfig(format!(
                "way must be at least 2, got {}",
                self.way
            )));
        }
        if self.train_shot == 0 || self.test_shot == 0 {
            return Err(FewshotError::InvalidConfig("shots must be at least 1".into()));
        }
        if self.query_count == 0 {
            return Err(FewshotError::InvalidConfig(
                "query_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled task: a labeled support set, a labeled query set, and the map
/// from local labels back to dataset class ids.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: SupportSet,
    pub query_features: DMatrix<f64>,
    pub query_labels: Vec<usize>,
    /// `class_identity_map[k]` is the dataset class behind local label `k`.
    pub class_identity_map: Vec<usize>,
}

/// Independent sampling stream for one worker: `base_seed + worker_id`.
pub fn worker_stream(base_seed: u64, worker_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(worker_id))
}

/// Draw one episode: K distinct classes uniformly from the split, then
/// shot+Q distinct items per class, the first `shot` as support. The shot
/// count is `train_shot` on the meta-train split and `test_shot` elsewhere.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &ClassDataset,
    split: Split,
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode, FewshotError> {
    config.validate()?;
    let classes = dataset.classes_in(split);
    if classes.len() < config.way {
        return Err(FewshotError::InsufficientClasses {
            available: classes.len(),
            requested: config.way,
        });
    }
    let shot = match split {
        Split::MetaTrain => config.train_shot,
        _ => config.test_shot,
    };
    let per_class = shot + config.query_count;
    let dim = dataset.feature_dim();

    let picked = sample_indices(rng, classes.len(), config.way);
    let class_identity_map: Vec<usize> = picked.iter().map(|i| classes[i]).collect();

    let mut support_features = DMatrix::zeros(config.way * shot, dim);
    let mut support_labels = Vec::with_capacity(config.way * shot);
    let mut query_features = DMatrix::zeros(config.way * config.query_count, dim);
    let mut query_labels = Vec::with_capacity(config.way * config.query_count);

    for (local, &class) in class_identity_map.iter().enumerate() {
        let pool = dataset.items_of(class);
        if pool.nrows() < per_class {
            return Err(FewshotError::InsufficientItems {
                class,
                available: pool.nrows(),
                requested: per_class,
            });
        }
        let chosen = sample_indices(rng, pool.nrows(), per_class);
        for (slot, item) in chosen.iter().enumerate() {
            if slot < shot {
                support_features
                    .row_mut(local * shot + slot)
                    .copy_from(&pool.row(item));
                support_labels.push(local);
            } else {
                let q = slot - shot;
                query_features
                    .row_mut(local * config.query_count + q)
                    .copy_from(&pool.row(item));
                query_labels.push(local);
            }
        }
    }

    Ok(Episode {
        support: SupportSet::new(support_features, support_labels, config.way)?,
        query_features,
        query_labels,
        class_identity_map,
    })
}

/// Synthetic task distribution: each class is an isotropic Gaussian whose
/// mean lies on the unit sphere of the informative subspace and is zero in
/// the noise dims. Items add noise of scale `cluster_spread` in informative
/// dims and scale 1 in noise dims. Splits get `num_classes_per_split`
/// classes each, ids assigned train, then val, then test.
pub fn synthetic_task_distribution<R: Rng + ?Sized>(
    num_classes_per_split: usize,
    items_per_class: usize,
    informative_dim: usize,
    noise_dim: usize,
    cluster_spread: f64,
    rng: &mut R,
) -> Result<ClassDataset, FewshotError> {
    if num_classes_per_split == 0 || items_per_class == 0 || informative_dim == 0 {
        return Err(FewshotError::InvalidConfig(
            "class count, item count, and informative_dim must be at least 1".into(),
        ));
    }
    if !(cluster_spread >= 0.0) {
        return Err(FewshotError::InvalidConfig(format!(
            "cluster_spread must be nonnegative, got {cluster_spread}"
        )));
    }
    let dim = informative_dim + noise_dim;
    let total = 3 * num_classes_per_split;
    let mut items = Vec::with_capacity(total);
    for _ in 0..total {
        let mut mean = vec![0.0f64; informative_dim];
        loop {
            for v in mean.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for v in mean.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
        let mut class_items = DMatrix::zeros(items_per_class, dim);
        for i in 0..items_per_class {
            for c in 0..informative_dim {
                let noise: f64 = rng.sample(StandardNormal);
                class_items[(i, c)] = mean[c] + cluster_spread * noise;
            }
            for c in informative_dim..dim {
                class_items[(i, c)] = rng.sample(StandardNormal);
            }
        }
        items.push(class_items);
    }
    let splits = [
        (0..num_classes_per_split).collect(),
        (num_classes_per_split..2 * num_classes_per_split).collect(),
        (2 * num_classes_per_split..total).collect(),
    ];
    ClassDataset::new(items, splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `data.csv` with header-free lines `label,v1,...,vD`.
    Csv,
    /// `features.idx` (f64, n x d) and `labels.idx` (i32, n), big-endian
    /// with the classic magic-dims-payload layout.
    Idx,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    meta_train: Vec<usize>,
    meta_val: Vec<usize>,
    meta_test: Vec<usize>,
}

const MANIFEST_FILE: &str = "splits.json";
const CSV_FILE: &str = "data.csv";
const FEATURES_FILE: &str = "features.idx";
const LABELS_FILE: &str = "labels.idx";

/// Write a dataset directory: the item table in the chosen format plus the
/// `splits.json` manifest mapping split names to class-id lists.
pub fn save_dataset(
    dir: &Path,
    dataset: &ClassDataset,
    format: DatasetFormat,
) -> Result<(), FewshotError> {
    std::fs::create_dir_all(dir)?;
    let manifest = SplitManifest {
        meta_train: dataset.splits[0].clone(),
        meta_val: dataset.splits[1].clone(),
        meta_test: dataset.splits[2].clone(),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("split manifest always serializes");
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;

    match format {
        DatasetFormat::Csv => {
            let mut writer = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(dir.join(CSV_FILE))
                .map_err(csv_io)?;
            for (class, m) in dataset.items.iter().enumerate() {
                for row in 0..m.nrows() {
                    let mut record = vec![class.to_string()];
                    // Display for f64 is the shortest exact decimal, so the
                    // round trip through text is lossless.
                    record.extend((0..m.ncols()).map(|c| format!("{}", m[(row, c)])));
                    writer.write_record(&record).map_err(csv_io)?;
                }
            }
            writer.flush()?;
        }
        DatasetFormat::Idx => {
            let mut features: Vec<u8> = Vec::new();
            let total: usize = dataset.items.iter().map(|m| m.nrows()).sum();
            let dim = dataset.feature_dim();
            features.extend_from_slice(&[0, 0, 0x0e, 2]);
            features.write_u32::<BigEndian>(total as u32)?;
            features.write_u32::<BigEndian>(dim as u32)?;
            let mut labels: Vec<u8> = Vec::new();
            labels.extend_from_slice(&[0, 0, 0x0c, 1]);
            labels.write_u32::<BigEndian>(total as u32)?;
            for (class, m) in dataset.items.iter().enumerate() {
                for row in 0..m.nrows() {
                    for c in 0..dim {
                        features.write_f64::<BigEndian>(m[(row, c)])?;
                    }
                    labels.write_i32::<BigEndian>(class as i32)?;
                }
            }
            std::fs::write(dir.join(FEATURES_FILE), features)?;
            std::fs::write(dir.join(LABELS_FILE), labels)?;
        }
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`] (or by hand in the
/// documented formats).
pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<ClassDataset, FewshotError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = std::fs::read_to_string(&manifest_path)?;
    let manifest: SplitManifest =
        serde_json::from_str(&manifest_text).map_err(|e| FewshotError::ParseError {
            location: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;

    let rows: Vec<(usize, Vec<f64>)> = match format {
        DatasetFormat::Csv => read_csv_rows(&dir.join(CSV_FILE))?,
        DatasetFormat::Idx => read_idx_rows(&dir.join(FEATURES_FILE), &dir.join(LABELS_FILE))?,
    };
    if rows.is_empty() {
        return Err(FewshotError::ParseError {
            location: dir.display().to_string(),
            message: "dataset holds no items".into(),
        });
    }
    let num_classes = rows.iter().map(|(label, _)| label + 1).max().unwrap();
    let dim = rows[0].1.len();
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for (label, values) in rows {
        per_class[label].push(values);
    }
    let mut items = Vec::with_capacity(num_classes);
    for (class, class_rows) in per_class.into_iter().enumerate() {
        if class_rows.is_empty() {
            return Err(FewshotError::ParseError {
                location: dir.display().to_string(),
                message: format!("class {class} has no items"),
            });
        }
        let mut m = DMatrix::zeros(class_rows.len(), dim);
        for (i, row) in class_rows.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                m[(i, c)] = v;
            }
        }
        items.push(m);
    }
    ClassDataset::new(
        items,
        [manifest.meta_train, manifest.meta_val, manifest.meta_test],
    )
}

fn csv_io(err: csv::Error) -> FewshotError {
    FewshotError::ParseError {
        location: "csv".into(),
        message: err.to_string(),
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, Vec<f64>)>, FewshotError> {
    let text = std::fs::read_to_string(path)?;
    let loc = |line: usize| format!("{} line {line}", path.display());
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_text = fields.next().expect("split yields at least one field");
        let label: usize = label_text.trim().parse().map_err(|_| FewshotError::ParseError {
            location: loc(line_no),
            message: format!("bad class label {label_text:?}"),
        })?;
        let mut values = Vec::new();
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|_| FewshotError::ParseError {
                location: loc(line_no),
                message: format!("bad feature value {field:?}"),
            })?;
            values.push(v);
        }
        if values.is_empty() {
            return Err(FewshotError::ParseError {
                location: loc(line_no),
                message: "row has a label but no features".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(FewshotError::ParseError {
                    location: loc(line_no),
                    message: format!("row has {} features but earlier rows have {w}", values.len()),
                });
            }
            _ => {}
        }
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(FewshotError::ParseError {
            location: loc(1),
            message: "empty dataset file".into(),
        });
    }
    Ok(rows)
}

fn read_idx_rows(
    features_path: &Path,
    labels_path: &Path,
) -> Result<Vec<(usize, Vec<f64>)>, FewshotError> {
    let feature_bytes = std::fs::read(features_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let floc = |offset: usize| format!("{} offset {offset}", features_path.display());
    let lloc = |offset: usize| format!("{} offset {offset}", labels_path.display());

    let mut cursor = std::io::Cursor::new(&feature_bytes);
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| FewshotError::ParseError {
        location: floc(0),
        message: "file too short for the magic header".into(),
    })?;
    if magic != [0, 0, 0x0e, 2] {
        return Err(FewshotError::ParseError {
            location: floc(0),
            message: format!("expected f64 rank-2 magic [0,0,14,2], got {magic:?}"),
        });
    }
    let n = cursor.read_u32::<BigEndian>().map_err(|_| FewshotError::ParseError {
        location: floc(4),
        message: "missing row count".into(),
    })? as usize;
    let dim = cursor.read_u32::<BigEndian>().map_err(|_| FewshotError::ParseError {
        location: floc(8),
        message: "missing column count".into(),
    })? as usize;
    let mut features = Vec::with_capacity(n);
    for row in 0..n {
        let mut values = Vec::with_capacity(dim);
        for col in 0..dim {
            let offset = 12 + 8 * (row * dim + col);
            let v = cursor
                .read_f64::<BigEndian>()
                .map_err(|_| FewshotError::ParseError {
                    location: floc(offset),
                    message: "feature table ends early".into(),
                })?;
            values.push(v);
        }
        features.push(values);
    }

    let mut cursor = std::io::Cursor::new(&label_bytes);
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| FewshotError::ParseError {
        location: lloc(0),
        message: "file too short for the magic header".into(),
    })?;
    if magic != [0, 0, 0x0c, 1] {
        return Err(FewshotError::ParseError {
            location: lloc(0),
            message: format!("expected i32 rank-1 magic [0,0,12,1], got {magic:?}"),
        });
    }
    let ln = cursor.read_u32::<BigEndian>().map_err(|_| FewshotError::ParseError {
        location: lloc(4),
        message: "missing label count".into(),
    })? as usize;
    if ln != n {
        return Err(FewshotError::ParseError {
            location: lloc(4),
            message: format!("{ln} labels for {n} feature rows"),
        });
    }
    let mut rows = Vec::with_capacity(n);
    for (row, values) in features.into_iter().enumerate() {
        let offset = 8 + 4 * row;
        let label = cursor
            .read_i32::<BigEndian>()
            .map_err(|_| FewshotError::ParseError {
                location: lloc(offset),
                message: "label table ends early".into(),
            })?;
        if label < 0 {
            return Err(FewshotError::ParseError {
                location: lloc(offset),
                message: format!("negative class label {label}"),
            });
        }
        rows.push((label as usize, values));
    }
    Ok(rows)
}
