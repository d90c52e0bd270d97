//! Agglomerative clustering of token embeddings.
//!
//! The driver is the generic nearest-neighbour scheme: every active cluster
//! keeps its nearest neighbour, and each step merges the globally closest
//! pair. Candidate pairs are ordered by `(distance, smaller node id, larger
//! node id)`, so equal distances resolve to the smallest pair of node ids.
//! Leaves are nodes `0..T`; the merge at step `s` creates node `T + s`.
//!
//! Ward linkage is computed from centroids and sizes and needs no distance
//! matrix. The other linkages keep a dense matrix updated by Lance-Williams.
//! All supported linkages are reducible, which keeps neighbour lists valid
//! after a merge except for clusters whose neighbour took part in it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingMatrix;
use crate::belief::TokenId;
use crate::error::{Result, RslmError};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Average,
    Complete,
    Single,
}

impl FromStr for Linkage {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ward" => Ok(Self::Ward),
            "average" => Ok(Self::Average),
            "complete" => Ok(Self::Complete),
            "single" => Ok(Self::Single),
            _ => Err(RslmError::InvalidArgument(format!("unknown linkage {s:?}"))),
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ward => "ward",
            Self::Average => "average",
            Self::Complete => "complete",
            Self::Single => "single",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Merge history of an agglomerative clustering over `leaves` points.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTree {
    leaves: usize,
    merges: Vec<Merge>,
}

impl ClusterTree {
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Partition of the leaves into `k` clusters, each sorted, ordered by
    /// smallest member.
    pub fn cut(&self, k: usize) -> Result<Vec<Vec<TokenId>>> {
        if k == 0 || k > self.leaves {
            return Err(RslmError::InvalidArgument(format!(
                "cannot cut {} leaves into {k} clusters",
                self.leaves
            )));
        }
        let mut parent: Vec<usize> = (0..self.leaves + self.merges.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (step, m) in self.merges[..self.leaves - k].iter().enumerate() {
            let node = self.leaves + step;
            let l = find(&mut parent, m.left);
            let r = find(&mut parent, m.right);
            parent[l] = node;
            parent[r] = node;
        }
        let mut by_root: std::collections::BTreeMap<usize, Vec<TokenId>> = Default::default();
        let mut order = Vec::new();
        for t in 0..self.leaves {
            let root = find(&mut parent, t);
            let entry = by_root.entry(root).or_default();
            if entry.is_empty() {
                order.push(root);
            }
            entry.push(t as TokenId);
        }
        Ok(order
            .into_iter()
            .map(|r| by_root.remove(&r).unwrap())
            .collect())
    }
}

enum Distances {
    Ward { centroids: Vec<f64>, dim: usize },
    Matrix { d: Vec<f64>, n: usize },
}

struct State {
    linkage: Linkage,
    dist: Distances,
    size: Vec<usize>,
    node: Vec<usize>,
    active: Vec<bool>,
}

impl State {
    fn distance(&self, i: usize, j: usize) -> f64 {
        match &self.dist {
            Distances::Ward { centroids, dim } => {
                let ci = &centroids[i * dim..(i + 1) * dim];
                let cj = &centroids[j * dim..(j + 1) * dim];
                let sq: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
                let (ni, nj) = (self.size[i] as f64, self.size[j] as f64);
                (2.0 * ni * nj / (ni + nj) * sq).sqrt()
            }
            Distances::Matrix { d, n } => d[i * n + j],
        }
    }

    /// Nearest active slot to `i`, ties by node id. Returns `(distance, slot)`.
    fn nearest(&self, i: usize, exec: Execution) -> (f64, usize) {
        let (d, _, slot) = exec
            .argmin_range(self.active.len(), |j| {
                (j != i && self.active[j]).then(|| (self.distance(i, j), self.node[j]))
            })
            .expect("at least two active clusters");
        (d, slot)
    }

    fn merge_into(&mut self, keep: usize, gone: usize) {
        let (nk, ng) = (self.size[keep] as f64, self.size[gone] as f64);
        match &mut self.dist {
            Distances::Ward { centroids, dim } => {
                let dim = *dim;
                for c in 0..dim {
                    let a = centroids[keep * dim + c];
                    let b = centroids[gone * dim + c];
                    centroids[keep * dim + c] = (nk * a + ng * b) / (nk + ng);
                }
            }
            Distances::Matrix { d, n } => {
                let n = *n;
                for k in 0..n {
                    if !self.active[k] || k == keep || k == gone {
                        continue;
                    }
                    let (a, b) = (d[keep * n + k], d[gone * n + k]);
                    let v = match self.linkage {
                        Linkage::Single => a.min(b),
                        Linkage::Complete => a.max(b),
                        Linkage::Average => (nk * a + ng * b) / (nk + ng),
                        Linkage::Ward => unreachable!("ward uses centroids"),
                    };
                    d[keep * n + k] = v;
                    d[k * n + keep] = v;
                }
            }
        }
        self.size[keep] += self.size[gone];
        self.active[gone] = false;
    }
}

/// Agglomerative clustering of the rows of `e`, Euclidean metric.
pub fn hierarchical_cluster(e: &EmbeddingMatrix, linkage: Linkage) -> Result<ClusterTree> {
    hierarchical_cluster_with(e, linkage, Execution::default())
}

pub fn hierarchical_cluster_with(
    e: &EmbeddingMatrix,
    linkage: Linkage,
    exec: Execution,
) -> Result<ClusterTree> {
    let n = e.rows();
    if n < 2 {
        return Err(RslmError::InvalidArgument(format!(
            "clustering needs at least 2 points, got {n}"
        )));
    }
    let dist = match linkage {
        Linkage::Ward => Distances::Ward {
            centroids: e.as_slice().to_vec(),
            dim: e.cols(),
        },
        _ => {
            let rows = exec.map_range(n, |i| {
                (0..n)
                    .map(|j| {
                        e.row(i)
                            .iter()
                            .zip(e.row(j))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect::<Vec<_>>()
            });
            Distances::Matrix {
                d: rows.concat(),
                n,
            }
        }
    };
    let mut st = State {
        linkage,
        dist,
        size: vec![1; n],
        node: (0..n).collect(),
        active: vec![true; n],
    };
    let init: Vec<(f64, usize)> = {
        let st = &st;
        exec.map_range(n, |i| st.nearest(i, Execution::Sequential))
    };
    let mut nn: Vec<usize> = init.iter().map(|x| x.1).collect();
    let mut nnd: Vec<f64> = init.iter().map(|x| x.0).collect();

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let key = |i: usize| {
            let (a, b) = (st.node[i], st.node[nn[i]]);
            (nnd[i], a.min(b), a.max(b))
        };
        let i = (0..n)
            .filter(|&i| st.active[i])
            .min_by(|&x, &y| {
                let (kx, ky) = (key(x), key(y));
                kx.0.total_cmp(&ky.0)
                    .then(kx.1.cmp(&ky.1))
                    .then(kx.2.cmp(&ky.2))
            })
            .expect("active clusters remain");
        let j = nn[i];
        let distance = nnd[i];
        let (a, b) = (st.node[i], st.node[j]);
        let (keep, gone) = (i.min(j), i.max(j));
        st.merge_into(keep, gone);
        let new_node = n + step;
        st.node[keep] = new_node;
        merges.push(Merge {
            left: a.min(b),
            right: a.max(b),
            distance,
            size: st.size[keep],
        });
        if step == n - 2 {
            break;
        }
        let (d, s) = st.nearest(keep, exec);
        nn[keep] = s;
        nnd[keep] = d;
        for k in 0..n {
            if !st.active[k] || k == keep {
                continue;
            }
            if nn[k] == i || nn[k] == j {
                let (d, s) = st.nearest(k, exec);
                nn[k] = s;
                nnd[k] = d;
            } else {
                // The new node has the largest id, so it only wins strictly.
                let d = st.distance(k, keep);
                if d < nnd[k] {
                    nn[k] = keep;
                    nnd[k] = d;
                }
            }
        }
    }
    Ok(ClusterTree { leaves: n, merges })
}
