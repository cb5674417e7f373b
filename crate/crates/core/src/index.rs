//! Exact radius-neighbor index.
//!
//! L2 in up to [`KD_TREE_MAX_DIM`] dimensions is served by a k-d tree;
//! everything else (higher dimensions, cosine) by a linear scan. Neighborhoods
//! are closed balls and include the query point itself.
//!
//! Besides plain range queries the index hands out a [`ClaimCursor`], which
//! returns each point at most once across a sequence of queries. DBSCAN
//! expansion only ever needs neighbors that are not yet in a cluster, so the
//! k-d tree can skip whole subtrees once they are fully claimed.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::EmbeddingMatrix;
use crate::projection::{cosine_kernel, dot, l2_unchecked, Metric};

/// Highest dimensionality for which L2 queries use the k-d tree.
pub const KD_TREE_MAX_DIM: usize = 16;
const LEAF_SIZE: usize = 16;
const NONE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("cannot index an empty point set")]
    Empty,
    #[error("points must have at least one dimension")]
    ZeroDimension,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("point {0} has zero norm; cosine distance is undefined")]
    ZeroNorm(usize),
}

/// Work counters, cumulative since construction or the last reset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub queries: u64,
    pub distance_evals: u64,
    pub node_visits: u64,
}

#[derive(Default)]
struct Counters {
    queries: AtomicU64,
    distance_evals: AtomicU64,
    node_visits: AtomicU64,
}

impl Counters {
    fn add(&self, dist: u64, nodes: u64) {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.distance_evals.fetch_add(dist, Ordering::Relaxed);
        self.node_visits.fetch_add(nodes, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexKind {
    KdTree,
    BruteForce,
}

struct Node {
    start: u32,
    end: u32,
    left: u32,
    right: u32,
    parent: u32,
}

struct KdTree {
    /// Tree position -> original point id.
    order: Vec<u32>,
    /// Point coordinates in tree order.
    coords: Vec<f64>,
    nodes: Vec<Node>,
    /// `2 * dim` per node: lower corner then upper corner.
    bounds: Vec<f64>,
    /// Original point id -> leaf node.
    leaf_of: Vec<u32>,
}

pub struct NeighborIndex {
    metric: Metric,
    dim: usize,
    n: usize,
    points: Vec<f64>,
    norms: Vec<f64>,
    kd: Option<KdTree>,
    counters: Counters,
}

impl std::fmt::Debug for NeighborIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NeighborIndex")
            .field("metric", &self.metric)
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("kind", &self.kind())
            .finish()
    }
}

/// Builds an index over row-major `points` of dimension `dim`.
pub fn build_index(points: Vec<f64>, dim: usize, metric: Metric) -> Result<NeighborIndex, IndexError> {
    NeighborIndex::new(points, dim, metric)
}

impl NeighborIndex {
    pub fn new(points: Vec<f64>, dim: usize, metric: Metric) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDimension);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(IndexError::Ragged { len: points.len(), dim });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(IndexError::Empty);
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos / dim));
        }
        let mut norms = Vec::new();
        if metric == Metric::Cosine {
            norms = points.chunks_exact(dim).map(|p| dot(p, p).sqrt()).collect();
            if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                return Err(IndexError::ZeroNorm(i));
            }
        }
        let kd = (metric == Metric::L2 && dim <= KD_TREE_MAX_DIM).then(|| KdTree::build(&points, dim));
        Ok(Self {
            metric,
            dim,
            n,
            points,
            norms,
            kd,
            counters: Counters::default(),
        })
    }

    pub fn from_matrix(matrix: &EmbeddingMatrix, metric: Metric) -> Result<Self, IndexError> {
        Self::new(matrix.to_f64(), matrix.d(), metric)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn kind(&self) -> IndexKind {
        if self.kd.is_some() {
            IndexKind::KdTree
        } else {
            IndexKind::BruteForce
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn stats(&self) -> QueryStats {
        QueryStats {
            queries: self.counters.queries.load(Ordering::Relaxed),
            distance_evals: self.counters.distance_evals.load(Ordering::Relaxed),
            node_visits: self.counters.node_visits.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.counters.queries.store(0, Ordering::Relaxed);
        self.counters.distance_evals.store(0, Ordering::Relaxed);
        self.counters.node_visits.store(0, Ordering::Relaxed);
    }

    /// Distance between indexed points `i` and `j` under the index metric.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match self.metric {
            Metric::L2 => l2_unchecked(self.point(i), self.point(j)),
            Metric::Cosine => self.cosine(i, j),
        }
    }

    #[inline]
    fn cosine(&self, i: usize, j: usize) -> f64 {
        cosine_kernel(self.point(i), self.point(j), self.norms[i], self.norms[j])
    }

    /// All `j` with `dist(i, j) <= epsilon`, ascending.
    pub fn range_query(&self, i: usize, epsilon: f64) -> Vec<usize> {
        let mut out = Vec::new();
        match &self.kd {
            Some(kd) => {
                let (dist, nodes) = kd.range(self.point(i), epsilon, &mut out);
                self.counters.add(dist, nodes);
            }
            None => {
                out.extend((0..self.n).filter(|&j| self.distance(i, j) <= epsilon));
                self.counters.add(self.n as u64, 0);
            }
        }
        out.sort_unstable();
        out
    }

    /// Neighbor count of point `i` (self-inclusive), stopping once `cap`
    /// is reached.
    pub fn count_within(&self, i: usize, epsilon: f64, cap: usize) -> usize {
        match &self.kd {
            Some(kd) => {
                let mut dist = 0;
                let mut nodes = 0;
                let c = kd.count(self.point(i), epsilon, cap, 0, &mut dist, &mut nodes);
                self.counters.add(dist, nodes);
                c
            }
            None => {
                let mut count = 0;
                let mut evals = 0;
                for j in 0..self.n {
                    evals += 1;
                    if self.distance(i, j) <= epsilon {
                        count += 1;
                        if count >= cap {
                            break;
                        }
                    }
                }
                self.counters.add(evals, 0);
                count
            }
        }
    }

    /// Core flags for one DBSCAN pass, computed in parallel.
    pub fn core_flags(&self, epsilon: f64, minpts: usize) -> Vec<bool> {
        (0..self.n)
            .into_par_iter()
            .map(|i| self.count_within(i, epsilon, minpts) >= minpts)
            .collect()
    }

    /// Fresh cursor with every point unclaimed.
    pub fn cursor(&self) -> ClaimCursor<'_> {
        let remaining = match &self.kd {
            Some(kd) => kd.nodes.iter().map(|nd| nd.end - nd.start).collect(),
            None => Vec::new(),
        };
        ClaimCursor {
            index: self,
            claimed: vec![false; self.n],
            remaining,
            unclaimed: (0..self.n as u32).collect(),
        }
    }
}

/// Per-pass claim state over a [`NeighborIndex`].
pub struct ClaimCursor<'a> {
    index: &'a NeighborIndex,
    /// By original point id.
    claimed: Vec<bool>,
    /// Unclaimed points per k-d tree node.
    remaining: Vec<u32>,
    /// Brute-force only: unclaimed ids, compacted lazily.
    unclaimed: Vec<u32>,
}

impl ClaimCursor<'_> {
    pub fn is_claimed(&self, i: usize) -> bool {
        self.claimed[i]
    }

    pub fn claim(&mut self, i: usize) -> bool {
        if self.claimed[i] {
            return false;
        }
        self.claimed[i] = true;
        if let Some(kd) = &self.index.kd {
            let mut node = kd.leaf_of[i];
            while node != NONE {
                self.remaining[node as usize] -= 1;
                node = kd.nodes[node as usize].parent;
            }
        }
        true
    }

    /// Claims every unclaimed point within `epsilon` of point `i` and
    /// appends their ids to `out` (order unspecified).
    pub fn claim_neighbors(&mut self, i: usize, epsilon: f64, out: &mut Vec<usize>) {
        let index = self.index;
        let start = out.len();
        let (dist, nodes) = match &index.kd {
            Some(kd) => {
                let mut dist = 0;
                let mut nodes = 0;
                self.kd_claim(kd, index.point(i), epsilon, 0, false, out, &mut dist, &mut nodes);
                (dist, nodes)
            }
            None => {
                let claimed = &self.claimed;
                self.unclaimed.retain(|&j| !claimed[j as usize]);
                let evals = self.unclaimed.len() as u64;
                for &j in &self.unclaimed {
                    if index.distance(i, j as usize) <= epsilon {
                        out.push(j as usize);
                    }
                }
                (evals, 0)
            }
        };
        for &i in &out[start..] {
            self.claim(i);
        }
        index.counters.add(dist, nodes);
    }

    #[allow(clippy::too_many_arguments)]
    fn kd_claim(
        &self,
        kd: &KdTree,
        q: &[f64],
        epsilon: f64,
        node: usize,
        inside: bool,
        out: &mut Vec<usize>,
        dist: &mut u64,
        nodes: &mut u64,
    ) {
        if self.remaining[node] == 0 {
            return;
        }
        *nodes += 1;
        let dim = q.len();
        let inside = inside || {
            if kd.min_dist(q, node) > epsilon {
                return;
            }
            kd.max_dist(q, node) <= epsilon
        };
        let nd = &kd.nodes[node];
        if nd.left == NONE {
            for pos in nd.start as usize..nd.end as usize {
                let id = kd.order[pos] as usize;
                if self.claimed[id] {
                    continue;
                }
                if inside {
                    out.push(id);
                } else {
                    *dist += 1;
                    if l2_unchecked(q, &kd.coords[pos * dim..(pos + 1) * dim]) <= epsilon {
                        out.push(id);
                    }
                }
            }
            return;
        }
        self.kd_claim(kd, q, epsilon, nd.left as usize, inside, out, dist, nodes);
        self.kd_claim(kd, q, epsilon, nd.right as usize, inside, out, dist, nodes);
    }
}

impl KdTree {
    fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::new();
        let mut bounds = Vec::new();
        let mut leaf_of = vec![NONE; n];
        // (start, end, parent, is_left)
        let mut stack = vec![(0usize, n, NONE, false)];
        while let Some((start, end, parent, is_left)) = stack.pop() {
            let id = nodes.len() as u32;
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for &p in &order[start..end] {
                let row = &points[p as usize * dim..(p as usize + 1) * dim];
                for a in 0..dim {
                    lo[a] = lo[a].min(row[a]);
                    hi[a] = hi[a].max(row[a]);
                }
            }
            bounds.extend_from_slice(&lo);
            bounds.extend_from_slice(&hi);
            nodes.push(Node {
                start: start as u32,
                end: end as u32,
                left: NONE,
                right: NONE,
                parent,
            });
            if parent != NONE {
                let pn = &mut nodes[parent as usize];
                if is_left {
                    pn.left = id;
                } else {
                    pn.right = id;
                }
            }
            let axis = (0..dim)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
                .unwrap();
            if end - start <= LEAF_SIZE || hi[axis] == lo[axis] {
                for &p in &order[start..end] {
                    leaf_of[p as usize] = id;
                }
                continue;
            }
            let mid = start + (end - start) / 2;
            order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                points[a as usize * dim + axis]
                    .total_cmp(&points[b as usize * dim + axis])
                    .then(a.cmp(&b))
            });
            // Right pushed first so the left subtree gets the lower node id.
            stack.push((mid, end, id, false));
            stack.push((start, mid, id, true));
        }
        let mut coords = Vec::with_capacity(points.len());
        for &p in &order {
            coords.extend_from_slice(&points[p as usize * dim..(p as usize + 1) * dim]);
        }
        Self {
            order,
            coords,
            nodes,
            bounds,
            leaf_of,
        }
    }

    fn lo(&self, node: usize, dim: usize) -> &[f64] {
        &self.bounds[node * 2 * dim..node * 2 * dim + dim]
    }

    fn hi(&self, node: usize, dim: usize) -> &[f64] {
        &self.bounds[node * 2 * dim + dim..(node + 1) * 2 * dim]
    }

    /// Lower bound on the distance from `q` to any point in the node. Uses
    /// the same subtraction/summation order as the point kernel, so the bound
    /// also holds after rounding.
    fn min_dist(&self, q: &[f64], node: usize) -> f64 {
        let dim = q.len();
        let (lo, hi) = (self.lo(node, dim), self.hi(node, dim));
        let mut acc = 0.0;
        for a in 0..dim {
            let t = if q[a] < lo[a] {
                lo[a] - q[a]
            } else if q[a] > hi[a] {
                q[a] - hi[a]
            } else {
                0.0
            };
            acc += t * t;
        }
        acc.sqrt()
    }

    /// Upper bound on the distance from `q` to any point in the node.
    fn max_dist(&self, q: &[f64], node: usize) -> f64 {
        let dim = q.len();
        let (lo, hi) = (self.lo(node, dim), self.hi(node, dim));
        let mut acc = 0.0;
        for a in 0..dim {
            let t = (q[a] - lo[a]).abs().max((hi[a] - q[a]).abs());
            acc += t * t;
        }
        acc.sqrt()
    }

    fn range(&self, q: &[f64], epsilon: f64, out: &mut Vec<usize>) -> (u64, u64) {
        let dim = q.len();
        let mut dist = 0;
        let mut visits = 0;
        let mut stack = vec![(0usize, false)];
        while let Some((node, inside)) = stack.pop() {
            visits += 1;
            let inside = inside || {
                if self.min_dist(q, node) > epsilon {
                    continue;
                }
                self.max_dist(q, node) <= epsilon
            };
            let nd = &self.nodes[node];
            if inside {
                out.extend(self.order[nd.start as usize..nd.end as usize].iter().map(|&p| p as usize));
                continue;
            }
            if nd.left == NONE {
                for pos in nd.start as usize..nd.end as usize {
                    dist += 1;
                    if l2_unchecked(q, &self.coords[pos * dim..(pos + 1) * dim]) <= epsilon {
                        out.push(self.order[pos] as usize);
                    }
                }
            } else {
                stack.push((nd.right as usize, false));
                stack.push((nd.left as usize, false));
            }
        }
        (dist, visits)
    }

    fn count(&self, q: &[f64], epsilon: f64, cap: usize, node: usize, dist: &mut u64, visits: &mut u64) -> usize {
        *visits += 1;
        if self.min_dist(q, node) > epsilon {
            return 0;
        }
        let nd = &self.nodes[node];
        let size = (nd.end - nd.start) as usize;
        if self.max_dist(q, node) <= epsilon {
            return size;
        }
        let dim = q.len();
        if nd.left == NONE {
            let mut c = 0;
            for pos in nd.start as usize..nd.end as usize {
                *dist += 1;
                if l2_unchecked(q, &self.coords[pos * dim..(pos + 1) * dim]) <= epsilon {
                    c += 1;
                    if c >= cap {
                        break;
                    }
                }
            }
            return c;
        }
        let left = self.count(q, epsilon, cap, nd.left as usize, dist, visits);
        if left >= cap {
            return left;
        }
        left + self.count(q, epsilon, cap - left, nd.right as usize, dist, visits)
    }
}
