//! Structural checks for built trees, shared by the integration and
//! acceptance tests. Member sets and core points are recomputed here from
//! the raw layer assignments and the points.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use semtree::{NodeId, SemanticTree, NOISE};

pub type Distance = fn(&[f64], &[f64]) -> f64;

/// Strict subset nesting of member sets, strictly decreasing stored cluster
/// counts, non-increasing noise counts. With `points`, also checks that the
/// core points of each cluster land in exactly one cluster of every later
/// layer.
pub fn check_tree(
    tree: &SemanticTree,
    points: Option<(&[Vec<f64>], Distance)>,
) -> Result<(), String> {
    let layers = tree.layers();
    let n = tree.len();
    for w in layers.windows(2) {
        if w[1].cluster_count >= w[0].cluster_count {
            return Err(format!(
                "cluster counts not strictly decreasing: {} then {}",
                w[0].cluster_count, w[1].cluster_count
            ));
        }
        let noise = |l: &semtree::ClusterLayer| l.assignment.iter().filter(|&&c| c == NOISE).count();
        if noise(&w[1]) > noise(&w[0]) {
            return Err(format!("noise count rose from {} to {}", noise(&w[0]), noise(&w[1])));
        }
        if w[1].epsilon <= w[0].epsilon {
            return Err("epsilon not increasing".into());
        }
    }
    if layers.last().map(|l| l.cluster_count) != Some(1) {
        return Err("last layer is not a single root".into());
    }

    // attachment: densest stored layer where the point is clustered
    let attach: Vec<NodeId> = (0..n)
        .map(|i| {
            layers
                .iter()
                .enumerate()
                .find(|(_, l)| l.assignment[i] != NOISE)
                .map(|(li, l)| NodeId::new(li, l.assignment[i] as usize))
                .unwrap_or(tree.root())
        })
        .collect();
    let ancestor_or_self = |mut a: NodeId, b: NodeId| loop {
        if a == b {
            return true;
        }
        match tree.parent(a) {
            Some(p) if p.layer <= b.layer => a = p,
            _ => return false,
        }
    };
    for node in tree.nodes() {
        let members: BTreeSet<usize> = tree.node_members_sorted(node).map_err(|e| e.to_string())?.into_iter().collect();
        let expected: BTreeSet<usize> = (0..n).filter(|&i| ancestor_or_self(attach[i], node)).collect();
        if members != expected {
            return Err(format!("members of {node} differ from the attachment rule"));
        }
        if members.is_empty() {
            return Err(format!("{node} is empty"));
        }
        match tree.parent(node) {
            Some(p) => {
                if p.layer != node.layer + 1 {
                    return Err(format!("{node} has parent {p} off the next layer"));
                }
                let parent: BTreeSet<usize> = tree.node_members_sorted(p).unwrap().into_iter().collect();
                if !members.is_subset(&parent) {
                    return Err(format!("{node} is not a subset of its parent {p}"));
                }
                if !tree.children(p).contains(&node) {
                    return Err(format!("{p} does not list child {node}"));
                }
            }
            None if node != tree.root() => return Err(format!("{node} has no parent")),
            None => {
                if members.len() != n {
                    return Err("root does not hold every point".into());
                }
            }
        }
        let mut seen = HashSet::new();
        for child in tree.children(node) {
            for m in tree.node_members_sorted(child).unwrap() {
                if !seen.insert(m) {
                    return Err(format!("children of {node} overlap at point {m}"));
                }
            }
        }
    }

    if let Some((pts, dist)) = points {
        let minpts = tree.params().minpts;
        let real = layers.len() - usize::from(tree.has_synthetic_root());
        for a in 0..real {
            let eps = layers[a].epsilon;
            let core: Vec<usize> = (0..n)
                .filter(|&i| layers[a].assignment[i] != NOISE)
                .filter(|&i| (0..n).filter(|&j| j == i || dist(&pts[i], &pts[j]) <= eps).count() >= minpts)
                .collect();
            for b in a + 1..layers.len() {
                for c in 0..layers[a].cluster_count as u32 {
                    let targets: HashSet<u32> = core
                        .iter()
                        .filter(|&&i| layers[a].assignment[i] == c)
                        .map(|&i| layers[b].assignment[i])
                        .collect();
                    if targets.len() != 1 || targets.contains(&NOISE) {
                        return Err(format!("core points of L{a}C{c} spread over {targets:?} at layer {b}"));
                    }
                }
            }
        }
    }
    Ok(())
}
