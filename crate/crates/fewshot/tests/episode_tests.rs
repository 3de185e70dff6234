//! Statistical and structural properties of the episode sampler over many
//! draws, plus dataset round trips through both disk formats.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fewshot::episodes::{
    load_dataset, sample_episode, save_dataset, synthetic_task_distribution, worker_stream,
    ClassDataset, DatasetFormat, EpisodeConfig, Split,
};

fn benchmark_dataset(seed: u64) -> ClassDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthetic_task_distribution(20, 30, 4, 2, 0.5, &mut rng).unwrap()
}

/// Bit pattern of a feature row, used as an item fingerprint: continuous
/// draws collide with probability zero, and without-replacement sampling
/// guarantees distinct rows inside an episode.
fn row_key(m: &nalgebra::DMatrix<f64>, row: usize) -> Vec<u64> {
    (0..m.ncols()).map(|c| m[(row, c)].to_bits()).collect()
}

#[test]
fn ten_thousand_episodes_keep_every_invariant() {
    let dataset = benchmark_dataset(501);
    let config = EpisodeConfig {
        way: 5,
        train_shot: 1,
        test_shot: 2,
        query_count: 3,
        seed: 0,
    };
    let mut rng = worker_stream(77, 0);
    let mut class_hits = vec![0usize; dataset.num_classes()];
    let episodes = 10_000;

    for e in 0..episodes {
        // Alternate splits to exercise both shot settings.
        let split = if e % 2 == 0 { Split::MetaTrain } else { Split::MetaTest };
        let shot = if e % 2 == 0 { 1 } else { 2 };
        let ep = sample_episode(&dataset, split, &config, &mut rng).unwrap();

        // Way distinct classes, all inside the split.
        let distinct: HashSet<usize> = ep.class_identity_map.iter().copied().collect();
        assert_eq!(distinct.len(), 5, "episode {e} repeated a class");
        let allowed: HashSet<usize> = dataset.classes_in(split).iter().copied().collect();
        assert!(
            distinct.iter().all(|c| allowed.contains(c)),
            "episode {e} leaked a class across splits"
        );

        // Exact per-class counts.
        assert_eq!(ep.support.num_samples(), 5 * shot);
        assert_eq!(ep.query_features.nrows(), 15);
        for local in 0..5 {
            assert_eq!(
                ep.support.labels.iter().filter(|&&l| l == local).count(),
                shot,
                "episode {e} support count off for class {local}"
            );
            assert_eq!(
                ep.query_labels.iter().filter(|&&l| l == local).count(),
                3,
                "episode {e} query count off for class {local}"
            );
        }

        // Support and query never share an item.
        let support_keys: HashSet<Vec<u64>> = (0..ep.support.num_samples())
            .map(|r| row_key(&ep.support.features, r))
            .collect();
        assert_eq!(support_keys.len(), ep.support.num_samples(), "episode {e} repeated a support item");
        for r in 0..ep.query_features.nrows() {
            assert!(
                !support_keys.contains(&row_key(&ep.query_features, r)),
                "episode {e} put one item in both support and query"
            );
        }

        if split == Split::MetaTrain {
            for &c in &ep.class_identity_map {
                class_hits[c] += 1;
            }
        }
    }

    // Uniform class usage on the meta-train split: each of the 20 classes
    // should appear in about way/20 = 25% of its 5000 episodes.
    let train_episodes = (episodes / 2) as f64;
    for &c in dataset.classes_in(Split::MetaTrain) {
        let freq = class_hits[c] as f64 / train_episodes;
        assert!(
            (0.23..=0.27).contains(&freq),
            "class {c} appeared in {:.1}% of episodes",
            freq * 100.0
        );
    }
}

#[test]
fn worker_streams_are_reproducible_and_distinct() {
    let dataset = benchmark_dataset(502);
    let config = EpisodeConfig {
        way: 4,
        train_shot: 2,
        test_shot: 2,
        query_count: 2,
        seed: 0,
    };
    let mut a = worker_stream(99, 0);
    let mut b = worker_stream(99, 0);
    let mut c = worker_stream(99, 1);
    let ep_a = sample_episode(&dataset, Split::MetaVal, &config, &mut a).unwrap();
    let ep_b = sample_episode(&dataset, Split::MetaVal, &config, &mut b).unwrap();
    let ep_c = sample_episode(&dataset, Split::MetaVal, &config, &mut c).unwrap();
    assert_eq!(ep_a.support.features, ep_b.support.features);
    assert_eq!(ep_a.class_identity_map, ep_b.class_identity_map);
    assert_ne!(
        (ep_a.class_identity_map.clone(), row_key(&ep_a.support.features, 0)),
        (ep_c.class_identity_map.clone(), row_key(&ep_c.support.features, 0)),
        "different worker ids produced the same first episode"
    );
}

#[test]
fn both_disk_formats_round_trip_a_realistic_dataset() {
    let dataset = benchmark_dataset(503);
    for format in [DatasetFormat::Csv, DatasetFormat::Idx] {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &dataset, format).unwrap();
        let loaded = load_dataset(dir.path(), format).unwrap();
        assert_eq!(loaded.num_classes(), dataset.num_classes());
        assert_eq!(loaded.feature_dim(), dataset.feature_dim());
        for c in 0..dataset.num_classes() {
            assert_eq!(
                dataset.items_of(c),
                loaded.items_of(c),
                "{format:?} altered class {c}"
            );
        }
        for split in [Split::MetaTrain, Split::MetaVal, Split::MetaTest] {
            assert_eq!(dataset.classes_in(split), loaded.classes_in(split));
        }
    }
}

#[test]
fn formats_agree_with_each_other() {
    let dataset = benchmark_dataset(504);
    let dir_csv = tempfile::tempdir().unwrap();
    let dir_idx = tempfile::tempdir().unwrap();
    save_dataset(dir_csv.path(), &dataset, DatasetFormat::Csv).unwrap();
    save_dataset(dir_idx.path(), &dataset, DatasetFormat::Idx).unwrap();
    let from_csv = load_dataset(dir_csv.path(), DatasetFormat::Csv).unwrap();
    let from_idx = load_dataset(dir_idx.path(), DatasetFormat::Idx).unwrap();
    for c in 0..dataset.num_classes() {
        assert_eq!(from_csv.items_of(c), from_idx.items_of(c));
    }
}
