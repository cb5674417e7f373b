//! Semantic tree built by density relaxation.
//!
//! DBSCAN is re-run at `epsilon0 + L * delta_epsilon` for `L = 0, 1, ...`
//! with fixed `minpts`. The first pass that finds any cluster becomes layer
//! 0; a later pass is stored only when it has strictly fewer clusters than
//! the last stored layer. A pass with a single cluster is stored only if
//! that cluster covers every point; it is then the root and the build
//! stops. Stored cluster counts are therefore strictly decreasing.
//!
//! Every node of a stored layer gets exactly one parent in the next stored
//! layer: the cluster holding the majority of its members (lowest cluster id
//! on ties). Node member sets are derived from the tree, not from the raw
//! assignment vectors: a document belongs to the node where it first leaves
//! noise (its attachment node) and to all ancestors of that node. This keeps
//! sibling sets disjoint and makes every child a subset of its parent even
//! when DBSCAN hands a border point to a different cluster at a larger
//! radius.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::{debug, info, warn};
use thiserror::Error;

use crate::dbscan::{dbscan, ClusterLayer, DbscanParams, NOISE};
use crate::index::{IndexError, NeighborIndex, QueryStats};
use crate::projection::Metric;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("index metric {index} does not match parameter metric {params}")]
    MetricMismatch { index: Metric, params: Metric },
    #[error("no cluster formed within {0} iterations")]
    NoClusters(usize),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("tree file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Handle of a tree node: cluster `cluster` of stored layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub layer: u32,
    pub cluster: u32,
}

impl NodeId {
    pub fn new(layer: usize, cluster: usize) -> Self {
        Self {
            layer: layer as u32,
            cluster: cluster as u32,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}C{}", self.layer, self.cluster)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed node label {s:?}");
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, cluster) = rest.split_once('C').ok_or_else(bad)?;
        Ok(NodeId {
            layer: layer.parse().map_err(|_| bad())?,
            cluster: cluster.parse().map_err(|_| bad())?,
        })
    }
}

/// Per-pass diagnostics of a build.
#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub pass: usize,
    pub epsilon: f64,
    pub cluster_count: usize,
    pub noise_count: usize,
    pub stored: bool,
    pub work: QueryStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub passes: Vec<PassRecord>,
}

impl BuildReport {
    /// Largest neighbor-query work of any single pass.
    pub fn max_pass_work(&self) -> QueryStats {
        let mut out = QueryStats::default();
        for p in &self.passes {
            out.queries = out.queries.max(p.work.queries);
            out.distance_evals = out.distance_evals.max(p.work.distance_evals);
            out.node_visits = out.node_visits.max(p.work.node_visits);
        }
        out
    }
}

/// Stored layers plus the parent links between them.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTree {
    params: DbscanParams,
    n: usize,
    passes: usize,
    synthetic_root: bool,
    layers: Vec<ClusterLayer>,
    /// `parents[l][c]`: parent cluster of `(l, c)` in layer `l + 1`.
    parents: Vec<Vec<u32>>,
    children: Vec<Vec<Vec<u32>>>,
    attachment: Vec<NodeId>,
    /// Documents in depth-first order; each node owns a contiguous span.
    order: Vec<u32>,
    spans: Vec<Vec<(u32, u32)>>,
}

/// Builds the semantic tree over `index`.
pub fn build_tree(index: &NeighborIndex, params: &DbscanParams) -> Result<SemanticTree, TreeError> {
    build_tree_with_report(index, params).map(|(t, _)| t)
}

/// Like [`build_tree`], also returning per-pass diagnostics.
pub fn build_tree_with_report(
    index: &NeighborIndex,
    params: &DbscanParams,
) -> Result<(SemanticTree, BuildReport), TreeError> {
    params.validate()?;
    if index.metric() != params.metric {
        return Err(TreeError::MetricMismatch {
            index: index.metric(),
            params: params.metric,
        });
    }
    let n = index.len();
    let mut layers: Vec<ClusterLayer> = Vec::new();
    let mut parents: Vec<Vec<u32>> = Vec::new();
    // Top-most node containing each point so far, by cluster id in the last
    // stored layer.
    let mut top = vec![NOISE; n];
    let mut report = BuildReport::default();
    let mut complete = false;
    let mut passes = 0;

    for pass in 0..params.max_iterations {
        let epsilon = params.epsilon_at(pass);
        let before = index.stats();
        let mut layer = dbscan(index, epsilon, params.minpts)?;
        let after = index.stats();
        passes = pass + 1;
        let noise = layer.noise_count();
        let count = layer.cluster_count;
        let full = count == 1 && noise == 0;
        // A one-cluster pass carries no structure unless it is the root.
        let store = match (count, layers.last()) {
            (0, _) => false,
            (1, _) => full,
            (_, None) => true,
            (_, Some(last)) => count < last.cluster_count,
        };
        debug!("pass {pass}: epsilon {epsilon} clusters {count} noise {noise}");
        report.passes.push(PassRecord {
            pass,
            epsilon,
            cluster_count: count,
            noise_count: noise,
            stored: store,
            work: QueryStats {
                queries: after.queries - before.queries,
                distance_evals: after.distance_evals - before.distance_evals,
                node_visits: after.node_visits - before.node_visits,
            },
        });
        if !store {
            continue;
        }
        info!("stored layer {} at epsilon {epsilon}: {count} clusters, {noise} noise", layers.len());
        layer.layer_index = layers.len();
        if let Some(prev) = layers.last() {
            parents.push(link_layers(prev, &layer, &mut top));
        } else {
            top.copy_from_slice(&layer.assignment);
        }
        layers.push(layer);
        if full {
            complete = true;
            break;
        }
    }

    if layers.is_empty() {
        return Err(TreeError::NoClusters(params.max_iterations));
    }
    let synthetic_root = !complete;
    if synthetic_root {
        warn!(
            "no single all-points cluster after {} iterations; appending a synthetic root",
            params.max_iterations
        );
        let root = ClusterLayer {
            layer_index: layers.len(),
            epsilon: params.epsilon_at(params.max_iterations),
            assignment: vec![0; n],
            cluster_count: 1,
        };
        parents.push(link_layers(layers.last().unwrap(), &root, &mut top));
        layers.push(root);
    }
    parents.push(Vec::new());
    let tree = SemanticTree::assemble(*params, n, passes, synthetic_root, layers, parents);
    Ok((tree, report))
}

/// Chooses a parent in `next` for every cluster of `prev` and advances
/// `top` to `next`.
fn link_layers(prev: &ClusterLayer, next: &ClusterLayer, top: &mut [u32]) -> Vec<u32> {
    let mut votes = vec![std::collections::HashMap::<u32, usize>::new(); prev.cluster_count];
    let mut raw_votes = vec![std::collections::HashMap::<u32, usize>::new(); prev.cluster_count];
    for (i, &c) in top.iter().enumerate() {
        let target = next.assignment[i];
        if target == NOISE {
            continue;
        }
        if c != NOISE {
            *votes[c as usize].entry(target).or_default() += 1;
        }
        let raw = prev.assignment[i];
        if raw != NOISE {
            *raw_votes[raw as usize].entry(target).or_default() += 1;
        }
    }
    let pick = |tally: &std::collections::HashMap<u32, usize>| {
        tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
    };
    let parent: Vec<u32> = (0..prev.cluster_count)
        .map(|c| pick(&votes[c]).or_else(|| pick(&raw_votes[c])).unwrap_or(0))
        .collect();
    for (i, t) in top.iter_mut().enumerate() {
        *t = if *t == NOISE {
            next.assignment[i]
        } else {
            parent[*t as usize]
        };
    }
    parent
}

impl SemanticTree {
    fn assemble(
        params: DbscanParams,
        n: usize,
        passes: usize,
        synthetic_root: bool,
        layers: Vec<ClusterLayer>,
        parents: Vec<Vec<u32>>,
    ) -> Self {
        let depth = layers.len();
        let mut children: Vec<Vec<Vec<u32>>> = layers.iter().map(|l| vec![Vec::new(); l.cluster_count]).collect();
        for l in 0..depth.saturating_sub(1) {
            for (c, &p) in parents[l].iter().enumerate() {
                children[l + 1][p as usize].push(c as u32);
            }
        }
        let attachment: Vec<NodeId> = (0..n)
            .map(|i| {
                layers
                    .iter()
                    .enumerate()
                    .find_map(|(l, layer)| layer.cluster_of(i).map(|c| NodeId::new(l, c)))
                    .unwrap_or(NodeId::new(depth - 1, 0))
            })
            .collect();
        let mut attached: Vec<Vec<Vec<u32>>> = layers.iter().map(|l| vec![Vec::new(); l.cluster_count]).collect();
        for (i, a) in attachment.iter().enumerate() {
            attached[a.layer as usize][a.cluster as usize].push(i as u32);
        }

        let mut order = Vec::with_capacity(n);
        let mut spans: Vec<Vec<(u32, u32)>> = layers.iter().map(|l| vec![(0, 0); l.cluster_count]).collect();
        // (node, children visited)
        let mut stack = vec![(NodeId::new(depth - 1, 0), false)];
        while let Some((node, done)) = stack.pop() {
            let (l, c) = (node.layer as usize, node.cluster as usize);
            if done {
                spans[l][c].1 = order.len() as u32;
                continue;
            }
            spans[l][c].0 = order.len() as u32;
            order.extend_from_slice(&attached[l][c]);
            stack.push((node, true));
            if l > 0 {
                for &child in children[l][c].iter().rev() {
                    stack.push((NodeId::new(l - 1, child as usize), false));
                }
            }
        }

        Self {
            params,
            n,
            passes,
            synthetic_root,
            layers,
            parents,
            children,
            attachment,
            order,
            spans,
        }
    }

    pub fn params(&self) -> &DbscanParams {
        &self.params
    }

    /// Number of documents.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// DBSCAN passes executed during the build.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// True when the build hit `max_iterations` and the root was appended.
    pub fn has_synthetic_root(&self) -> bool {
        self.synthetic_root
    }

    pub fn layers(&self) -> &[ClusterLayer] {
        &self.layers
    }

    pub fn root(&self) -> NodeId {
        NodeId::new(self.layers.len() - 1, 0)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.layers
            .get(node.layer as usize)
            .is_some_and(|l| (node.cluster as usize) < l.cluster_count)
    }

    /// All nodes, layer by layer, clusters ascending.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.cluster_count).map(move |c| NodeId::new(l, c)))
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(|l| l.cluster_count).sum()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        let p = *self.parents.get(node.layer as usize)?.get(node.cluster as usize)?;
        Some(NodeId::new(node.layer as usize + 1, p as usize))
    }

    /// Children of `node`, ascending cluster id.
    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        if node.layer == 0 || !self.contains(node) {
            return Vec::new();
        }
        self.children[node.layer as usize][node.cluster as usize]
            .iter()
            .map(|&c| NodeId::new(node.layer as usize - 1, c as usize))
            .collect()
    }

    /// Parent edges as `(child, parent)`, layer by layer.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes().filter_map(|n| self.parent(n).map(|p| (n, p))).collect()
    }

    pub fn epsilon(&self, node: NodeId) -> f64 {
        self.layers[node.layer as usize].epsilon
    }

    /// Member ids of `node` in depth-first document order.
    pub fn node_members(&self, node: NodeId) -> Result<&[u32], TreeError> {
        if !self.contains(node) {
            return Err(TreeError::UnknownNode(node));
        }
        let (a, b) = self.spans[node.layer as usize][node.cluster as usize];
        Ok(&self.order[a as usize..b as usize])
    }

    /// Member ids of `node`, ascending.
    pub fn node_members_sorted(&self, node: NodeId) -> Result<Vec<usize>, TreeError> {
        let mut m: Vec<usize> = self.node_members(node)?.iter().map(|&i| i as usize).collect();
        m.sort_unstable();
        Ok(m)
    }

    /// Densest node holding each document; the root for documents that are
    /// noise at every stored layer below it.
    pub fn attach_documents(&self) -> &[NodeId] {
        &self.attachment
    }

    /// Documents attached directly to `node`, ascending.
    pub fn attached_to(&self, node: NodeId) -> Vec<usize> {
        (0..self.n).filter(|&i| self.attachment[i] == node).collect()
    }

    /// Line-oriented text form; see [`SemanticTree::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        writeln!(s, "SEMTREE 1").unwrap();
        writeln!(
            s,
            "PARAMS epsilon0={} delta_epsilon={} minpts={} metric={} max_iterations={}",
            p.epsilon0, p.delta_epsilon, p.minpts, p.metric, p.max_iterations
        )
        .unwrap();
        writeln!(s, "POINTS {}", self.n).unwrap();
        writeln!(s, "PASSES {}", self.passes).unwrap();
        writeln!(s, "SYNTHETIC_ROOT {}", u8::from(self.synthetic_root)).unwrap();
        for layer in &self.layers {
            writeln!(s, "LAYER {} {} {}", layer.layer_index, layer.epsilon, layer.cluster_count).unwrap();
            s.push_str("RLE");
            let mut iter = layer.assignment.iter().peekable();
            while let Some(&v) = iter.next() {
                let mut run = 1;
                while iter.peek() == Some(&&v) {
                    iter.next();
                    run += 1;
                }
                if v == NOISE {
                    write!(s, " Nx{run}").unwrap();
                } else {
                    write!(s, " {v}x{run}").unwrap();
                }
            }
            s.push('\n');
        }
        for (child, parent) in self.edges() {
            writeln!(
                s,
                "EDGE {}:{} {}:{}",
                child.layer, child.cluster, parent.layer, parent.cluster
            )
            .unwrap();
        }
        s.push_str("END\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TreeError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, reason: &str| TreeError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("unexpected end of file, expected {what}")));

        let (ln, header) = next("header")?;
        if header != "SEMTREE 1" {
            return Err(err(ln, "expected header SEMTREE 1"));
        }
        let (ln, params_line) = next("PARAMS")?;
        let params = parse_params(params_line).map_err(|r| err(ln, &r))?;
        let (ln, l) = next("POINTS")?;
        let n: usize = keyed(l, "POINTS").ok_or_else(|| err(ln, "expected POINTS <n>"))?;
        let (ln, l) = next("PASSES")?;
        let passes: usize = keyed(l, "PASSES").ok_or_else(|| err(ln, "expected PASSES <count>"))?;
        let (ln, l) = next("SYNTHETIC_ROOT")?;
        let synthetic: u8 = keyed(l, "SYNTHETIC_ROOT").ok_or_else(|| err(ln, "expected SYNTHETIC_ROOT <0|1>"))?;

        let mut layers: Vec<ClusterLayer> = Vec::new();
        let mut edges = Vec::new();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            if line == "END" {
                ended = true;
                break;
            }
            let mut parts = line.split(' ');
            match parts.next() {
                Some("LAYER") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 3 {
                        return Err(err(ln, "expected LAYER <index> <epsilon> <cluster_count>"));
                    }
                    let index: usize = fields[0].parse().map_err(|_| err(ln, "bad layer index"))?;
                    if index != layers.len() {
                        return Err(err(ln, "layer indices must be consecutive from 0"));
                    }
                    let epsilon: f64 = fields[1].parse().map_err(|_| err(ln, "bad epsilon"))?;
                    let cluster_count: usize = fields[2].parse().map_err(|_| err(ln, "bad cluster count"))?;
                    let (ln2, rle) = lines.next().ok_or_else(|| err(ln, "missing RLE line"))?;
                    let assignment = parse_rle(rle, n, cluster_count).map_err(|r| err(ln2, &r))?;
                    layers.push(ClusterLayer {
                        layer_index: index,
                        epsilon,
                        assignment,
                        cluster_count,
                    });
                }
                Some("EDGE") => {
                    let fields: Vec<&str> = parts.collect();
                    let parse_node = |s: &str| -> Option<NodeId> {
                        let (l, c) = s.split_once(':')?;
                        Some(NodeId {
                            layer: l.parse().ok()?,
                            cluster: c.parse().ok()?,
                        })
                    };
                    if fields.len() != 2 {
                        return Err(err(ln, "expected EDGE <layer>:<cluster> <layer>:<cluster>"));
                    }
                    let child = parse_node(fields[0]).ok_or_else(|| err(ln, "bad child node"))?;
                    let parent = parse_node(fields[1]).ok_or_else(|| err(ln, "bad parent node"))?;
                    edges.push((ln, child, parent));
                }
                _ => return Err(err(ln, "unrecognized record")),
            }
        }
        if !ended {
            return Err(err(0, "missing END"));
        }
        if layers.is_empty() {
            return Err(err(0, "tree has no layers"));
        }
        let top = layers.last().unwrap();
        if top.cluster_count != 1 || top.noise_count() != 0 {
            return Err(err(0, "last layer must be a single all-points cluster"));
        }
        let mut parents: Vec<Vec<u32>> = layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                if l + 1 < layers.len() {
                    vec![NOISE; layer.cluster_count]
                } else {
                    Vec::new()
                }
            })
            .collect();
        for (ln, child, parent) in edges {
            let (cl, cc) = (child.layer as usize, child.cluster as usize);
            if parent.layer as usize != cl + 1
                || cl + 1 >= layers.len()
                || cc >= layers[cl].cluster_count
                || parent.cluster as usize >= layers[cl + 1].cluster_count
            {
                return Err(err(ln, "edge references an invalid node"));
            }
            parents[cl][cc] = parent.cluster;
        }
        if parents.iter().flatten().any(|&p| p == NOISE) {
            return Err(err(0, "node without parent edge"));
        }
        Ok(Self::assemble(params, n, passes, synthetic == 1, layers, parents))
    }
}

fn keyed<T: FromStr>(line: &str, key: &str) -> Option<T> {
    line.strip_prefix(key)?.strip_prefix(' ')?.parse().ok()
}

fn parse_params(line: &str) -> Result<DbscanParams, String> {
    let rest = line.strip_prefix("PARAMS ").ok_or("expected PARAMS line")?;
    let mut p = DbscanParams::new(f64::NAN, f64::NAN, 0, Metric::L2);
    for kv in rest.split(' ') {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad field {kv:?}"))?;
        let bad = || format!("bad value for {k}");
        match k {
            "epsilon0" => p.epsilon0 = v.parse().map_err(|_| bad())?,
            "delta_epsilon" => p.delta_epsilon = v.parse().map_err(|_| bad())?,
            "minpts" => p.minpts = v.parse().map_err(|_| bad())?,
            "metric" => p.metric = v.parse()?,
            "max_iterations" => p.max_iterations = v.parse().map_err(|_| bad())?,
            _ => return Err(format!("unknown parameter {k}")),
        }
    }
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

fn parse_rle(line: &str, n: usize, cluster_count: usize) -> Result<Vec<u32>, String> {
    let body = line.strip_prefix("RLE").ok_or("expected RLE line")?;
    let mut out = Vec::with_capacity(n);
    for tok in body.split(' ').filter(|t| !t.is_empty()) {
        let (v, run) = tok.split_once('x').ok_or_else(|| format!("bad run {tok:?}"))?;
        let run: usize = run.parse().map_err(|_| format!("bad run length in {tok:?}"))?;
        let v = if v == "N" {
            NOISE
        } else {
            let c: u32 = v.parse().map_err(|_| format!("bad cluster id in {tok:?}"))?;
            if c as usize >= cluster_count {
                return Err(format!("cluster id {c} out of range"));
            }
            c
        };
        if out.len() + run > n {
            return Err("assignment longer than point count".into());
        }
        out.extend(std::iter::repeat_n(v, run));
    }
    if out.len() != n {
        return Err(format!("assignment has {} entries, expected {n}", out.len()));
    }
    Ok(out)
}
