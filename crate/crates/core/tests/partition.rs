mod common;

use std::collections::HashSet;

use common::random_classification_data;
use fedpred::data::{
    class_histogram, mean_label_tv, partition, partition_indices, synth_classification, synth_regression,
    ClassificationKind, Dataset, PartitionSpec, RegressionKind,
};
use fedpred::Error;
use proptest::prelude::*;

fn blobs(n: usize, classes: usize) -> Dataset {
    synth_classification(ClassificationKind::GaussianBlobs, n, classes, 4, 3.0, 1).unwrap()
}

fn spec(n_clients: usize, heterogeneity: f64, seed: u64) -> PartitionSpec {
    PartitionSpec {
        n_clients,
        heterogeneity,
        seed,
    }
}

/// Disjoint cover with sizes `⌊N/n⌋` or `⌈N/n⌉`.
fn assert_cover(n: usize, clients: &[Vec<usize>]) {
    let mut seen = vec![false; n];
    for idx in clients {
        for &i in idx {
            assert!(!seen[i], "index {i} assigned twice");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "some index unassigned");
    let k = clients.len();
    for idx in clients {
        assert!(
            idx.len() == n / k || idx.len() == n.div_ceil(k),
            "size {}",
            idx.len()
        );
    }
}

#[test]
fn iid_histograms_match_global_proportions() {
    let ds = blobs(10_000, 10);
    let parts = partition(&ds, &spec(5, 0.0, 3)).unwrap();
    for c in &parts {
        let hist = class_histogram(c.labels().unwrap(), 10);
        for &count in &hist {
            let share = count as f64 / c.len() as f64;
            assert!((share - 0.1).abs() <= 0.05, "{hist:?}");
        }
    }
}

#[test]
fn fully_sorted_clients_see_two_classes() {
    let ds = blobs(10_000, 10);
    for c in partition(&ds, &spec(5, 1.0, 3)).unwrap() {
        let present = class_histogram(c.labels().unwrap(), 10)
            .iter()
            .filter(|&&v| v > 0)
            .count();
        assert_eq!(present, 2);
    }
}

#[test]
fn sorted_shard_fraction_tracks_heterogeneity() {
    let ds = blobs(1_000, 10);
    let labels = ds.labels().unwrap();
    let mut by_label: Vec<usize> = (0..ds.len()).collect();
    by_label.sort_by_key(|&i| labels[i]);
    let p = partition_indices(&ds, &spec(5, 0.7, 8)).unwrap();
    let k = 200;
    for (c, idx) in p.client_indices.iter().enumerate() {
        let shard: HashSet<usize> = by_label[c * k..(c + 1) * k].iter().copied().collect();
        let inside = idx.iter().filter(|i| shard.contains(i)).count();
        // The iid remainder may also land in the shard, so this is a lower bound.
        assert!(inside as f64 / k as f64 >= 0.7 - 1.0 / k as f64);
        assert!((p.non_iid_counts[c] as f64 / k as f64 - 0.7).abs() <= 1.0 / k as f64);
    }
}

#[test]
fn label_skew_grows_with_heterogeneity() {
    let ds = blobs(10_000, 10);
    let tv: Vec<f64> = [0.0, 0.35, 0.7, 0.9, 1.0]
        .iter()
        .map(|&h| mean_label_tv(&partition(&ds, &spec(5, h, 4)).unwrap()))
        .collect();
    for w in tv.windows(2) {
        assert!(w[0] < w[1], "{tv:?}");
    }
}

#[test]
fn partition_is_deterministic_in_seed() {
    let ds = blobs(500, 5);
    let a = partition_indices(&ds, &spec(4, 0.5, 11)).unwrap();
    assert_eq!(a, partition_indices(&ds, &spec(4, 0.5, 11)).unwrap());
    assert_ne!(a, partition_indices(&ds, &spec(4, 0.5, 12)).unwrap());
}

#[test]
fn rejects_bad_specs() {
    let ds = blobs(10, 2);
    assert!(matches!(
        partition_indices(&ds, &spec(11, 0.0, 0)),
        Err(Error::TooManyClients {
            items: 10,
            clients: 11
        })
    ));
    assert!(partition_indices(&ds, &spec(0, 0.0, 0)).is_err());
    assert!(partition_indices(&ds, &spec(2, 1.5, 0)).is_err());
    let reg = synth_regression(RegressionKind::Sine, 20, 0.1, 0).unwrap();
    assert!(matches!(
        partition_indices(&reg, &spec(2, 0.5, 0)),
        Err(Error::HeterogeneousRegression(_))
    ));
    assert_cover(
        20,
        &partition_indices(&reg, &spec(3, 0.0, 0)).unwrap().client_indices,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_balanced_disjoint_covers(
        n in 1usize..300,
        clients in 1usize..12,
        classes in 2usize..6,
        h in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(clients <= n);
        let ds = random_classification_data(n, 2, classes, seed);
        let p = partition_indices(&ds, &spec(clients, h, seed)).unwrap();
        assert_cover(n, &p.client_indices);
        for (idx, &taken) in p.client_indices.iter().zip(&p.non_iid_counts) {
            prop_assert_eq!(taken, (h * idx.len() as f64).floor() as usize);
        }
    }
}
