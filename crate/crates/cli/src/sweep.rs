//! Grid search over tree parameters.
//!
//! No automatic tuning: every combination is built and summarized so the
//! caller can pick one by eye.

use semtree::metrics::score_layers;
use semtree::{DbscanParams, EmbeddingMatrix, Metric};

use crate::error::CliError;
use crate::pipeline::grow_tree;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon0: f64,
    pub delta_epsilon: f64,
    pub minpts: usize,
    /// `None` when the build failed, with the reason in `error`.
    pub layers: Option<Vec<usize>>,
    pub passes: usize,
    pub synthetic_root: bool,
    /// Best ARI over layers and the layer reaching it.
    pub best: Option<(usize, f64)>,
    pub error: Option<String>,
}

pub fn param_sweep(
    matrix: &EmbeddingMatrix,
    metric: Metric,
    epsilon0: &[f64],
    delta_epsilon: &[f64],
    minpts: &[usize],
    max_iterations: usize,
    labels: Option<&[String]>,
) -> Result<Vec<SweepRow>, CliError> {
    let mut rows = Vec::new();
    for &e0 in epsilon0 {
        for &de in delta_epsilon {
            for &mp in minpts {
                let params = DbscanParams {
                    max_iterations,
                    ..DbscanParams::new(e0, de, mp, metric)
                };
                params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                let mut row = SweepRow {
                    epsilon0: e0,
                    delta_epsilon: de,
                    minpts: mp,
                    layers: None,
                    passes: 0,
                    synthetic_root: false,
                    best: None,
                    error: None,
                };
                match grow_tree(matrix, &params) {
                    Ok((tree, _)) => {
                        row.layers = Some(tree.layers().iter().map(|l| l.cluster_count).collect());
                        row.passes = tree.passes();
                        row.synthetic_root = tree.has_synthetic_root();
                        if let Some(labels) = labels {
                            let scores = score_layers(&tree, labels).map_err(|e| CliError::stage("sweep", e))?;
                            row.best = scores
                                .iter()
                                .map(|s| (s.layer_index, s.ari))
                                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                                    Some(b) if b.1 >= cur.1 => Some(b),
                                    _ => Some(cur),
                                });
                        }
                    }
                    Err(CliError::Stage { message, .. }) => row.error = Some(message),
                    Err(e) => return Err(e),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn sweep_to_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("epsilon0\tdelta_epsilon\tminpts\tpasses\tlayers\tcluster_counts\tbest_layer\tbest_ari\tnote\n");
    for r in rows {
        let counts = r
            .layers
            .as_ref()
            .map(|l| l.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        let (best_layer, best_ari) = r
            .best
            .map(|(l, a)| (l.to_string(), a.to_string()))
            .unwrap_or_default();
        let note = match (&r.error, r.synthetic_root) {
            (Some(e), _) => e.clone(),
            (None, true) => "synthetic root".into(),
            (None, false) => String::new(),
        };
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epsilon0,
            r.delta_epsilon,
            r.minpts,
            r.passes,
            r.layers.as_ref().map_or(0, Vec::len),
            counts,
            best_layer,
            best_ari,
            note
        ));
    }
    s
}
