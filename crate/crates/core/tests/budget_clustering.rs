use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rslm::budget::{
    analyze_budget, build_budget, cut_to_budget, hierarchical_cluster, hierarchical_cluster_with,
    synth_blobs, EmbeddingFormat, EmbeddingMatrix, Linkage,
};
use rslm::Execution;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-5.0f64..5.0) as f32 as f64)
        .collect();
    EmbeddingMatrix::new(rows, cols, data).unwrap()
}

/// Textbook greedy Ward: full matrix of squared distances, Lance-Williams
/// update, O(n^3) scan for the closest pair. Returns merge distances.
fn naive_ward(e: &EmbeddingMatrix) -> Vec<f64> {
    let n = e.rows();
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d2[i][j] = e
                .row(i)
                .iter()
                .zip(e.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    let mut size = vec![1.0; n];
    let mut alive = vec![true; n];
    let mut out = Vec::new();
    for _ in 0..n - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            for j in i + 1..n {
                if alive[i] && alive[j] && d2[i][j] < best.0 {
                    best = (d2[i][j], i, j);
                }
            }
        }
        let (d, i, j) = best;
        out.push(d.sqrt());
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let (ni, nj, nk) = (size[i], size[j], size[k]);
                let v = ((ni + nk) * d2[i][k] + (nj + nk) * d2[j][k] - nk * d) / (ni + nj + nk);
                d2[i][k] = v;
                d2[k][i] = v;
            }
        }
        size[i] += size[j];
        alive[j] = false;
    }
    out
}

#[test]
fn ward_matches_naive_lance_williams() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.random_range(2..25);
        let e = random_matrix(&mut rng, n, 3);
        let tree = hierarchical_cluster(&e, Linkage::Ward).unwrap();
        let want = naive_ward(&e);
        for (m, w) in tree.merges().iter().zip(&want) {
            assert!(
                (m.distance - w).abs() <= 1e-9 * w.max(1.0),
                "{} vs {w}",
                m.distance
            );
        }
    }
}

#[test]
fn fifty_point_two_blobs_recovered() {
    let (e, labels) = synth_blobs(50, 8, 2, 5).unwrap();
    let tree = hierarchical_cluster(&e, Linkage::Ward).unwrap();
    let parts = tree.cut(2).unwrap();
    let want: Vec<Vec<u32>> = (0..2)
        .map(|b| (0..50u32).filter(|&t| labels[t as usize] == b).collect())
        .collect();
    assert_eq!(parts, want);
}

#[test]
fn parallel_and_sequential_clustering_agree() {
    let (e, _) = synth_blobs(300, 6, 7, 2).unwrap();
    let a = hierarchical_cluster_with(&e, Linkage::Ward, Execution::Sequential).unwrap();
    let b = hierarchical_cluster_with(&e, Linkage::Ward, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn budget_file_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    synth_blobs(60, 4, 6, 8)
        .unwrap()
        .0
        .save(&path, EmbeddingFormat::Binary)
        .unwrap();
    let a = build_budget(&EmbeddingMatrix::load(&path).unwrap(), 10, Linkage::Ward).unwrap();
    let b = build_budget(&EmbeddingMatrix::load(&path).unwrap(), 10, Linkage::Ward).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn synthetic_sizes_concentrate_small() {
    let (e, _) = synth_blobs(400, 16, 40, 3).unwrap();
    let budget = build_budget(&e, 150, Linkage::Ward).unwrap();
    let report = analyze_budget(&budget, &e).unwrap();
    let total: usize = report.size_histogram.values().sum();
    assert_eq!(total, budget.num_clusters());
    let small: usize = report
        .size_histogram
        .iter()
        .filter(|(&s, _)| s <= 4)
        .map(|(_, c)| c)
        .sum();
    assert!(small * 2 > total, "{:?}", report.size_histogram);
    assert!(report.clusters.iter().all(|c| c.centroid_distance >= 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cuts_partition_and_budgets_are_bounded(
        seed in any::<u64>(),
        n in 2usize..40,
        linkage in prop_oneof![
            Just(Linkage::Ward),
            Just(Linkage::Average),
            Just(Linkage::Complete),
            Just(Linkage::Single)
        ],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_matrix(&mut rng, n, 2);
        let tree = hierarchical_cluster(&e, linkage).unwrap();
        prop_assert_eq!(tree.merges().len(), n - 1);
        if linkage == Linkage::Ward {
            for w in tree.merges().windows(2) {
                prop_assert!(w[1].distance >= w[0].distance * (1.0 - 1e-12));
            }
        }
        let k = rng.random_range(1..=n);
        let parts = tree.cut(k).unwrap();
        prop_assert_eq!(parts.len(), k);
        let mut all: Vec<u32> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());

        let budget = cut_to_budget(&tree, k, n).unwrap();
        prop_assert!(budget.len() <= k + n + 1);
        for id in budget.cluster_ids() {
            let members = budget.set(id).members();
            let subs: Vec<u32> = budget.subsets(id).to_vec();
            prop_assert_eq!(subs, members.to_vec());
        }
        prop_assert_eq!(budget.subsets(budget.universal_id()).len(), budget.len() - 1);
    }
}
