//! External validation of stored layers: contingency tables, ARI and NMI
//! computed over the points a layer actually clusters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dbscan::NOISE;
use crate::tree::SemanticTree;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} entries, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("every point is noise; nothing to compare")]
    AllNoise,
    #[error("ARI needs at least 2 covered points, got {0}")]
    TooFewPoints(usize),
    #[error("corpus is not labeled")]
    Unlabeled,
}

/// Co-occurrence counts between predicted clusters (rows) and reference
/// labels (columns), both in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let cols = counts.first().map_or(0, Vec::len);
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = row_sums.iter().sum();
        Self {
            counts,
            row_sums,
            col_sums,
            total,
        }
    }

    pub fn transpose(&self) -> Self {
        let cols = self.col_sums.len();
        Self::from_counts((0..cols).map(|j| self.counts.iter().map(|r| r[j]).collect()).collect())
    }
}

/// Table over the points whose prediction is not [`NOISE`].
pub fn contingency<T: Ord>(pred: &[u32], truth: &[T]) -> Result<ContingencyTable, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for (&p, t) in pred.iter().zip(truth) {
        if p == NOISE {
            continue;
        }
        let r = rows.len();
        rows.entry(p).or_insert(r);
        let c = cols.len();
        cols.entry(t).or_insert(c);
    }
    if rows.is_empty() {
        return Err(MetricsError::AllNoise);
    }
    // Re-rank so rows and columns follow key order.
    let row_rank: BTreeMap<u32, usize> = rows.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let col_rank: BTreeMap<&T, usize> = cols.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut counts = vec![vec![0u64; col_rank.len()]; row_rank.len()];
    for (&p, t) in pred.iter().zip(truth) {
        if p != NOISE {
            counts[row_rank[&p]][col_rank[t]] += 1;
        }
    }
    Ok(ContingencyTable::from_counts(counts))
}

fn choose2(x: u64) -> i128 {
    let x = i128::from(x);
    x * (x - 1) / 2
}

/// Adjusted Rand Index. Pair counts stay in exact integer arithmetic until
/// the final division. Returns 1.0 when the index is 0/0, which happens
/// only when both partitions are the same trivial partition.
pub fn adjusted_rand_index(table: &ContingencyTable) -> Result<f64, MetricsError> {
    if table.total < 2 {
        return Err(MetricsError::TooFewPoints(table.total as usize));
    }
    let pairs_both: i128 = table.counts.iter().flatten().map(|&x| choose2(x)).sum();
    let pairs_rows: i128 = table.row_sums.iter().map(|&x| choose2(x)).sum();
    let pairs_cols: i128 = table.col_sums.iter().map(|&x| choose2(x)).sum();
    let pairs_total = choose2(table.total);
    // (index - expected) / (max - expected), scaled by 2 * pairs_total.
    let numerator = 2 * pairs_total * pairs_both - 2 * pairs_rows * pairs_cols;
    let denominator = pairs_total * (pairs_rows + pairs_cols) - 2 * pairs_rows * pairs_cols;
    if denominator == 0 {
        return Ok(1.0);
    }
    Ok(numerator as f64 / denominator as f64)
}

fn entropy(sums: &[u64], total: f64) -> f64 {
    -sums
        .iter()
        .filter(|&&x| x > 0)
        .map(|&x| {
            let p = x as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mutual information in nats.
pub fn mutual_information(table: &ContingencyTable) -> f64 {
    let m = table.total as f64;
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            let outer = table.row_sums[i] as f64 * table.col_sums[j] as f64;
            mi += nij / m * ((m * nij).ln() - outer.ln());
        }
    }
    mi.max(0.0)
}

/// NMI with arithmetic-mean normalization. Both partitions trivial gives
/// 1.0; exactly one trivial gives 0.0.
pub fn normalized_mutual_information(table: &ContingencyTable) -> f64 {
    if table.total == 0 {
        return 1.0;
    }
    let m = table.total as f64;
    let h_rows = entropy(&table.row_sums, m);
    let h_cols = entropy(&table.col_sums, m);
    let trivial_rows = table.row_sums.iter().filter(|&&x| x > 0).count() <= 1;
    let trivial_cols = table.col_sums.iter().filter(|&&x| x > 0).count() <= 1;
    match (trivial_rows, trivial_cols) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let mi = mutual_information(table);
            (mi / ((h_rows + h_cols) / 2.0)).clamp(0.0, 1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScore {
    pub layer_index: usize,
    pub epsilon: f64,
    pub covered_count: usize,
    pub ari: f64,
    pub nmi: f64,
}

/// One score per stored layer, computed on the points that layer clusters.
/// A layer covering a single point scores 1.0 on both.
pub fn score_layers<T: Ord>(tree: &SemanticTree, truth: &[T]) -> Result<Vec<LayerScore>, MetricsError> {
    tree.layers()
        .iter()
        .map(|layer| {
            let table = contingency(&layer.assignment, truth)?;
            let ari = if table.total < 2 {
                1.0
            } else {
                adjusted_rand_index(&table)?
            };
            Ok(LayerScore {
                layer_index: layer.layer_index,
                epsilon: layer.epsilon,
                covered_count: table.total as usize,
                ari,
                nmi: normalized_mutual_information(&table),
            })
        })
        .collect()
}

/// Tab-separated `layer epsilon covered ari nmi` table with header.
pub fn scores_to_tsv(scores: &[LayerScore]) -> String {
    let mut s = String::from("layer\tepsilon\tcovered\tari\tnmi\n");
    for sc in scores {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            sc.layer_index, sc.epsilon, sc.covered_count, sc.ari, sc.nmi
        )
        .unwrap();
    }
    s
}

/// Long format for plotting: `layer epsilon metric value`.
pub fn scores_to_long_tsv(scores: &[LayerScore]) -> String {
    let mut s = String::from("layer\tepsilon\tmetric\tvalue\n");
    for sc in scores {
        for (name, v) in [("ari", sc.ari), ("nmi", sc.nmi), ("covered", sc.covered_count as f64)] {
            writeln!(s, "{}\t{}\t{}\t{}", sc.layer_index, sc.epsilon, name, v).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        let t = contingency(&[0, 0, 1, 1], &["A", "A", "B", "B"]).unwrap();
        assert_eq!(t.counts, vec![vec![2, 0], vec![0, 2]]);
        let t = contingency(&[0, NOISE, 1, 1], &["A", "A", "B", "B"]).unwrap();
        assert_eq!(t.counts, vec![vec![1, 0], vec![0, 2]]);
        assert_eq!(t.total, 3);
        assert_eq!(
            contingency(&[NOISE, NOISE], &["A", "B"]),
            Err(MetricsError::AllNoise)
        );
        assert!(matches!(
            contingency(&[0], &["A", "B"]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ari_reference_cases() {
        let same = contingency(&[0, 0, 1, 1, 2], &[5, 5, 7, 7, 9]).unwrap();
        assert_eq!(adjusted_rand_index(&same).unwrap(), 1.0);
        let one_vs_singletons = contingency(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap();
        assert_eq!(adjusted_rand_index(&one_vs_singletons).unwrap(), 0.0);
        let both_single = contingency(&[0, 0, 0], &[1, 1, 1]).unwrap();
        assert_eq!(adjusted_rand_index(&both_single).unwrap(), 1.0);
        let tiny = contingency(&[0], &[1]).unwrap();
        assert_eq!(adjusted_rand_index(&tiny), Err(MetricsError::TooFewPoints(1)));
    }

    #[test]
    fn nmi_reference_cases() {
        let same = contingency(&[0, 0, 1, 1], &["a", "a", "b", "b"]).unwrap();
        assert!((normalized_mutual_information(&same) - 1.0).abs() < 1e-15);
        let crossing = ContingencyTable::from_counts(vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(normalized_mutual_information(&crossing), 0.0);
        let both_trivial = ContingencyTable::from_counts(vec![vec![4]]);
        assert_eq!(normalized_mutual_information(&both_trivial), 1.0);
        let one_trivial = ContingencyTable::from_counts(vec![vec![2, 2]]);
        assert_eq!(normalized_mutual_information(&one_trivial), 0.0);
    }

    #[test]
    fn single_cluster_against_multiclass_truth_is_chance() {
        let t = contingency(&[0, 0, 0, 0, 0, 0], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_eq!(adjusted_rand_index(&t).unwrap(), 0.0);
        assert_eq!(normalized_mutual_information(&t), 0.0);
    }

    #[test]
    fn tsv_layout() {
        let scores = vec![LayerScore {
            layer_index: 0,
            epsilon: 0.5,
            covered_count: 10,
            ari: 1.0,
            nmi: 0.25,
        }];
        assert_eq!(
            scores_to_tsv(&scores),
            "layer\tepsilon\tcovered\tari\tnmi\n0\t0.5\t10\t1\t0.25\n"
        );
        assert_eq!(scores_to_long_tsv(&scores).lines().count(), 4);
    }
}
