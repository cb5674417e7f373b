//! Single DBSCAN pass over a [`NeighborIndex`].

use serde::{Deserialize, Serialize};

use crate::index::NeighborIndex;
use crate::projection::Metric;
use crate::tree::TreeError;

/// Assignment value for points outside every cluster.
pub const NOISE: u32 = u32::MAX;

/// Parameters of the growing-radius schedule.
///
/// Pass `L` runs DBSCAN at `epsilon0 + L * delta_epsilon` with a fixed
/// `minpts`. Neighbor counts include the point itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub epsilon0: f64,
    pub delta_epsilon: f64,
    pub minpts: usize,
    pub metric: Metric,
    pub max_iterations: usize,
}

pub const DEFAULT_MAX_ITERATIONS: usize = 100_000;

impl DbscanParams {
    pub fn new(epsilon0: f64, delta_epsilon: f64, minpts: usize, metric: Metric) -> Self {
        Self {
            epsilon0,
            delta_epsilon,
            minpts,
            metric,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if !(self.epsilon0.is_finite() && self.epsilon0 > 0.0) {
            return Err(TreeError::InvalidParams(format!(
                "epsilon0 must be positive, got {}",
                self.epsilon0
            )));
        }
        if !(self.delta_epsilon.is_finite() && self.delta_epsilon > 0.0) {
            return Err(TreeError::InvalidParams(format!(
                "delta_epsilon must be positive, got {}",
                self.delta_epsilon
            )));
        }
        if self.minpts == 0 {
            return Err(TreeError::InvalidParams("minpts must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(TreeError::InvalidParams("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Radius of pass `pass`.
    pub fn epsilon_at(&self, pass: usize) -> f64 {
        self.epsilon0 + pass as f64 * self.delta_epsilon
    }
}

/// Result of one DBSCAN pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLayer {
    pub layer_index: usize,
    pub epsilon: f64,
    /// Cluster id per point, or [`NOISE`].
    pub assignment: Vec<u32>,
    pub cluster_count: usize,
}

impl ClusterLayer {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn cluster_of(&self, i: usize) -> Option<usize> {
        let c = self.assignment[i];
        (c != NOISE).then_some(c as usize)
    }

    pub fn noise_count(&self) -> usize {
        self.assignment.iter().filter(|&&c| c == NOISE).count()
    }

    pub fn covered_count(&self) -> usize {
        self.len() - self.noise_count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &c in &self.assignment {
            if c != NOISE {
                sizes[c as usize] += 1;
            }
        }
        sizes
    }

    /// Points assigned to cluster `c` in this pass, ascending.
    pub fn raw_members(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a as usize == c && a != NOISE)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Classic DBSCAN at radius `epsilon`.
///
/// Clusters are numbered in order of their lowest-id core point. A border
/// point reachable from several clusters joins the first one expanded, which
/// is the same outcome as the textbook ascending-id scan with FIFO
/// expansion.
pub fn dbscan(index: &NeighborIndex, epsilon: f64, minpts: usize) -> Result<ClusterLayer, TreeError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(TreeError::InvalidParams(format!("epsilon must be positive, got {epsilon}")));
    }
    if minpts == 0 {
        return Err(TreeError::InvalidParams("minpts must be at least 1".into()));
    }
    let n = index.len();
    let core = index.core_flags(epsilon, minpts);
    let mut assignment = vec![NOISE; n];
    let mut cursor = index.cursor();
    let mut frontier = Vec::new();
    let mut found = Vec::new();
    let mut cluster = 0u32;
    for seed in 0..n {
        if !core[seed] || cursor.is_claimed(seed) {
            continue;
        }
        cursor.claim(seed);
        assignment[seed] = cluster;
        frontier.push(seed);
        while let Some(p) = frontier.pop() {
            found.clear();
            cursor.claim_neighbors(p, epsilon, &mut found);
            for &q in &found {
                assignment[q] = cluster;
                if core[q] {
                    frontier.push(q);
                }
            }
        }
        cluster += 1;
    }
    Ok(ClusterLayer {
        layer_index: 0,
        epsilon,
        assignment,
        cluster_count: cluster as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;

    fn blobs() -> NeighborIndex {
        let pts = vec![
            0.0, 0.0, 0.0, 0.1, 0.1, 0.0, //
            5.0, 5.0, 5.0, 5.1, 5.1, 5.0,
        ];
        build_index(pts, 2, Metric::L2).unwrap()
    }

    #[test]
    fn two_blobs() {
        let layer = dbscan(&blobs(), 0.2, 3).unwrap();
        assert_eq!(layer.cluster_count, 2);
        assert_eq!(layer.noise_count(), 0);
        assert_eq!(layer.assignment, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn radius_beyond_diameter_merges_everything() {
        let layer = dbscan(&blobs(), 10.0, 3).unwrap();
        assert_eq!(layer.cluster_count, 1);
        assert_eq!(layer.cluster_sizes(), vec![6]);
    }

    #[test]
    fn isolated_point_is_noise() {
        let idx = build_index(vec![0.0, 0.0], 2, Metric::L2).unwrap();
        let layer = dbscan(&idx, 1.0, 2).unwrap();
        assert_eq!(layer.cluster_count, 0);
        assert_eq!(layer.cluster_of(0), None);
        let layer = dbscan(&idx, 1.0, 1).unwrap();
        assert_eq!(layer.cluster_of(0), Some(0));
    }

    #[test]
    fn border_point_goes_to_first_expanded_cluster() {
        // Cluster with the lower-id core comes first; the non-core point at
        // 1.1 is 0.9 away from both 0.2 and 2.0 but has only 3 neighbors.
        let pts = vec![2.0, 2.05, 2.1, 2.2, 0.0, 0.05, 0.1, 0.2, 1.1];
        let idx = build_index(pts, 1, Metric::L2).unwrap();
        let layer = dbscan(&idx, 0.92, 4).unwrap();
        assert_eq!(layer.cluster_count, 2);
        assert_eq!(layer.cluster_of(0), Some(0));
        assert_eq!(layer.cluster_of(4), Some(1));
        assert_eq!(layer.cluster_of(8), Some(0));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(dbscan(&blobs(), 0.0, 3).is_err());
        assert!(dbscan(&blobs(), 1.0, 0).is_err());
        let p = DbscanParams::new(0.1, 0.0, 5, Metric::L2);
        assert!(p.validate().is_err());
    }
}
