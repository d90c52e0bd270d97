//! Focal-set budgeting: cluster token embeddings, cut the tree into `K`
//! groups, and keep the groups as the non-singleton focal sets.

mod cluster;
mod embeddings;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use cluster::{hierarchical_cluster, hierarchical_cluster_with, ClusterTree, Linkage, Merge};
pub use embeddings::{synth_blobs, EmbeddingFormat, EmbeddingMatrix, BINARY_MAGIC};

use crate::belief::FocalSetBudget;
use crate::error::{Result, RslmError};

/// Default upper bound on the vocabulary size accepted for exact clustering.
pub const DEFAULT_MAX_TOKENS: usize = 65_536;

/// Cuts `tree` into `k` clusters and builds the budget: all singletons, every
/// cluster with at least two members, and the universal set.
pub fn cut_to_budget(tree: &ClusterTree, k: usize, vocab_size: usize) -> Result<FocalSetBudget> {
    if vocab_size != tree.leaves() {
        return Err(RslmError::DimensionMismatch {
            expected: tree.leaves(),
            actual: vocab_size,
        });
    }
    if k == 0 || k > vocab_size {
        return Err(RslmError::InvalidArgument(format!(
            "K must be in 1..={vocab_size}, got {k}"
        )));
    }
    FocalSetBudget::from_clusters(vocab_size, tree.cut(k)?)
}

/// Clusters `e` and cuts at `k`; the usual one-shot path.
pub fn build_budget(e: &EmbeddingMatrix, k: usize, linkage: Linkage) -> Result<FocalSetBudget> {
    let tree = hierarchical_cluster(e, linkage)?;
    cut_to_budget(&tree, k, e.rows())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStat {
    pub set_id: usize,
    pub cardinality: usize,
    /// Mean Euclidean distance of member embeddings from their centroid.
    pub centroid_distance: f64,
}

/// Per-cluster spread and the distribution of cluster sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    pub clusters: Vec<ClusterStat>,
    pub size_histogram: BTreeMap<usize, usize>,
}

/// Centroid distances (in the input embedding space) and sizes of every
/// non-singleton, non-universal focal set.
pub fn analyze_budget(budget: &FocalSetBudget, e: &EmbeddingMatrix) -> Result<BudgetReport> {
    if budget.vocab_size() != e.rows() {
        return Err(RslmError::DimensionMismatch {
            expected: budget.vocab_size(),
            actual: e.rows(),
        });
    }
    let mut clusters = Vec::with_capacity(budget.num_clusters());
    let mut size_histogram = BTreeMap::new();
    for id in budget.cluster_ids() {
        let members = budget.set(id).members();
        let mut centroid = vec![0.0; e.cols()];
        for &t in members {
            for (c, x) in centroid.iter_mut().zip(e.row(t as usize)) {
                *c += x;
            }
        }
        let n = members.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
        let spread = members
            .iter()
            .map(|&t| {
                e.row(t as usize)
                    .iter()
                    .zip(&centroid)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n;
        clusters.push(ClusterStat {
            set_id: id,
            cardinality: members.len(),
            centroid_distance: spread,
        });
        *size_histogram.entry(members.len()).or_insert(0) += 1;
    }
    Ok(BudgetReport {
        clusters,
        size_histogram,
    })
}

impl BudgetReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("set_id,cardinality,centroid_distance\n");
        for c in &self.clusters {
            let _ = writeln!(s, "{},{},{}", c.set_id, c.cardinality, c.centroid_distance);
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("cardinality,count\n");
        for (size, count) in &self.size_histogram {
            let _ = writeln!(s, "{size},{count}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clusters: {}", self.clusters.len());
        if !self.clusters.is_empty() {
            let d: Vec<f64> = self.clusters.iter().map(|c| c.centroid_distance).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let max = d.iter().cloned().fold(0.0, f64::max);
            let _ = writeln!(
                s,
                "centroid distance (input embedding space): mean {mean:.4}, max {max:.4}"
            );
        }
        let _ = writeln!(s, "{:>12} {:>8}", "cardinality", "count");
        for (size, count) in &self.size_histogram {
            let _ = writeln!(s, "{size:>12} {count:>8}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_cuts() {
        let (e, _) = synth_blobs(8, 2, 2, 3).unwrap();
        let tree = hierarchical_cluster(&e, Linkage::Ward).unwrap();
        for k in [1, 8] {
            let b = cut_to_budget(&tree, k, 8).unwrap();
            assert_eq!(b.len(), 9, "k = {k}");
            assert_eq!(b.num_clusters(), 0);
        }
        assert!(cut_to_budget(&tree, 0, 8).is_err());
        assert!(cut_to_budget(&tree, 9, 8).is_err());
        assert!(cut_to_budget(&tree, 2, 7).is_err());
    }

    #[test]
    fn two_blob_budget() {
        let (e, _) = synth_blobs(6, 3, 2, 11).unwrap();
        let b = build_budget(&e, 2, Linkage::Ward).unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!(b.set(6).members(), &[0, 1, 2]);
        assert_eq!(b.set(7).members(), &[3, 4, 5]);
    }

    #[test]
    fn centroid_distances() {
        let e = EmbeddingMatrix::new(4, 2, vec![0.0, 0.0, 2.0, 0.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let b = FocalSetBudget::from_clusters(4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let r = analyze_budget(&b, &e).unwrap();
        assert_eq!(r.clusters[0].centroid_distance, 1.0);
        assert_eq!(r.clusters[1].centroid_distance, 0.0);
        assert_eq!(r.size_histogram.get(&2), Some(&2));
        assert!(r
            .to_csv()
            .starts_with("set_id,cardinality,centroid_distance\n4,2,1\n"));
        assert!(r.to_table().contains("input embedding space"));
    }
}
