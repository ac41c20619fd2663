use fedrane::data::{
    derived_rng, dirichlet_partition, dirichlet_proportions, generate_synthetic, histogram, label_entropy, load_csv,
    save_csv, split_local, Dataset, PartitionSet,
};
use fedrane::numeric::Matrix;
use proptest::prelude::*;

fn two_class(n: usize) -> Dataset {
    Dataset::new(Matrix::zeros(n, 1), (0..n).map(|i| i % 2).collect()).unwrap()
}

fn mean_client_entropy(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> f64 {
    let parts = dirichlet_partition(ds, k, alpha, seed).unwrap();
    let total: f64 = parts
        .iter()
        .map(|p| {
            let labels: Vec<usize> = p.indices.iter().map(|&i| ds.labels[i]).collect();
            label_entropy(&histogram(&labels, ds.classes))
        })
        .sum();
    total / k as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_a_disjoint_cover(seed in any::<u64>(), k in 1usize..12, alpha in 0.05f64..20.0, classes in 2usize..6) {
        let ds = generate_synthetic(classes, 3, 40, 0.5, seed).unwrap();
        let parts = dirichlet_partition(&ds, k, alpha, seed).unwrap();
        prop_assert_eq!(parts.len(), k);
        let mut seen = vec![0usize; ds.len()];
        for (id, p) in parts.iter().enumerate() {
            prop_assert_eq!(p.client_id, id);
            prop_assert!(!p.indices.is_empty());
            for &i in &p.indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(&parts, &dirichlet_partition(&ds, k, alpha, seed).unwrap());
    }

    #[test]
    fn proportions_sum_to_one(seed in any::<u64>(), k in 1usize..50, alpha in 0.01f64..100.0) {
        let mut rng = derived_rng(seed, &[]);
        if let Some(p) = dirichlet_proportions(alpha, k, &mut rng).unwrap() {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn local_split_partitions_client_indices(seed in any::<u64>(), ratio in 0.1f64..0.9) {
        let ds = generate_synthetic(3, 2, 30, 0.5, seed).unwrap();
        for p in dirichlet_partition(&ds, 3, 1.0, seed).unwrap().iter().filter(|p| p.indices.len() >= 4) {
            let s = split_local(p, ratio, seed).unwrap();
            let mut all = s.train_indices.clone();
            all.extend(&s.test_indices);
            all.sort_unstable();
            prop_assert_eq!(&all, &p.indices);
            prop_assert_eq!(s.train_indices.len(), (ratio * p.indices.len() as f64).round() as usize);
        }
    }
}

#[test]
fn skew_grows_as_alpha_shrinks() {
    let ds = two_class(1000);
    let mean = |alpha: f64| (0..20).map(|s| mean_client_entropy(&ds, 10, alpha, s)).sum::<f64>() / 20.0;
    let (low, high) = (mean(0.1), mean(5.0));
    assert!(low < high, "α=0.1: {low}, α=5: {high}");
}

#[test]
fn huge_alpha_splits_evenly() {
    let ds = two_class(1000);
    for seed in 0..5 {
        for p in dirichlet_partition(&ds, 10, 1e6, seed).unwrap() {
            let ones = p.indices.iter().filter(|&&i| ds.labels[i] == 1).count();
            let share = ones as f64 / p.indices.len() as f64;
            assert!((0.45..=0.55).contains(&share), "seed {seed}: {share}");
        }
    }
}

#[test]
fn data_is_a_function_of_the_seed() {
    let a = generate_synthetic(4, 8, 20, 0.5, 11).unwrap();
    assert_eq!(a, generate_synthetic(4, 8, 20, 0.5, 11).unwrap());
    assert_ne!(a, generate_synthetic(4, 8, 20, 0.5, 12).unwrap());
}

#[test]
fn csv_and_partition_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(3, 4, 10, 0.7, 5).unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&ds, &path).unwrap();
    assert_eq!(load_csv(&path).unwrap(), ds);

    let set = PartitionSet {
        k: 3,
        alpha: 0.5,
        seed: 5,
        clients: dirichlet_partition(&ds, 3, 0.5, 5).unwrap(),
    };
    let path = dir.path().join("parts.json");
    set.save(&path).unwrap();
    assert_eq!(PartitionSet::load(&path).unwrap(), set);
}
