//! Agglomerative clustering with Ward linkage.
//!
//! Starts from singletons and repeatedly merges the pair of clusters whose
//! union increases the total within-cluster sum of squares the least. Pair
//! costs are kept up to date with the Lance-Williams recurrence on squared
//! Euclidean distances,
//!
//! ```text
//! d(k, i+j) = ((n_i + n_k) d(i, k) + (n_j + n_k) d(j, k) - n_k d(i, j)) / (n_i + n_j + n_k)
//! ```
//!
//! where `d = 2 * (SSE increase)`. Plain O(N^3): the inputs are single
//! training batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One agglomeration step. Clusters live in slots named after their
/// original row; merging `a < b` keeps slot `a` and retires slot `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Increase in total within-cluster sum of squares.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id in `0..k` for each input row; ids follow ascending slot order.
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub merges: Vec<Merge>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }
}

pub fn ward_cluster(points: &Matrix, k: usize) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::config(
            "clusters",
            format!("k = {k} must lie in 1..={n}"),
        ));
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - k);

    for _ in 0..(n - k) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i * n + j];
                // Strictly smaller wins, so the first (lowest) pair keeps ties.
                if best.is_none_or(|(_, _, b)| d < b) {
                    best = Some((i, j, d));
                }
            }
        }
        let (a, b, d_ab) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for c in 0..n {
            if !active[c] || c == a || c == b {
                continue;
            }
            let nc = size[c] as f64;
            let updated = ((na + nc) * dist[a * n + c] + (nb + nc) * dist[b * n + c]
                - nc * d_ab)
                / (na + nb + nc);
            dist[a * n + c] = updated;
            dist[c * n + a] = updated;
        }
        size[a] += size[b];
        active[b] = false;
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
        merges.push(Merge {
            a,
            b,
            cost: d_ab / 2.0,
        });
    }

    let mut id_of_slot = vec![usize::MAX; n];
    let mut sizes = Vec::with_capacity(k);
    for slot in (0..n).filter(|&s| active[s]) {
        id_of_slot[slot] = sizes.len();
        sizes.push(size[slot]);
    }
    let labels = owner.iter().map(|&s| id_of_slot[s]).collect();
    Ok(ClusterAssignment {
        labels,
        sizes,
        merges,
    })
}
