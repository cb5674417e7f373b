//! Seeded Gaussian-blob corpora.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use semtree::{Corpus, Document, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate synthetic spec: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Corpus(#[from] semtree::corpus::CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec<f64>,
    pub size: usize,
    pub sigma: f64,
    pub label: String,
    /// Coarse label for two-level specs.
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase")]
pub enum SyntheticSpec {
    /// Blobs on the corners of a square with side `separation`.
    Corners {
        n_per_blob: usize,
        sigma: f64,
        #[serde(default = "one")]
        separation: f64,
    },
    /// `groups` super-groups of `blobs_per_group` blobs. Blob centers inside
    /// a group are `blob_separation` apart on a line; groups sit
    /// `group_separation` apart on the orthogonal axis.
    Hierarchy {
        groups: usize,
        blobs_per_group: usize,
        n_per_blob: usize,
        sigma: f64,
        #[serde(default = "one")]
        blob_separation: f64,
        #[serde(default = "ten")]
        group_separation: f64,
        /// Embedding dimension, at least 2; extra axes carry noise only.
        #[serde(default = "two")]
        dim: usize,
    },
    Blobs { blobs: Vec<Blob> },
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

fn two() -> usize {
    2
}

impl SyntheticSpec {
    pub fn blobs(&self) -> Vec<Blob> {
        match self {
            SyntheticSpec::Corners {
                n_per_blob,
                sigma,
                separation,
            } => [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                .iter()
                .enumerate()
                .map(|(b, &(x, y))| Blob {
                    center: vec![x * separation, y * separation],
                    size: *n_per_blob,
                    sigma: *sigma,
                    label: format!("blob{b}"),
                    group: None,
                })
                .collect(),
            SyntheticSpec::Hierarchy {
                groups,
                blobs_per_group,
                n_per_blob,
                sigma,
                blob_separation,
                group_separation,
                dim,
            } => {
                let mut out = Vec::new();
                for g in 0..*groups {
                    for b in 0..*blobs_per_group {
                        let mut center = vec![0.0; (*dim).max(2)];
                        center[0] = b as f64 * blob_separation;
                        center[1] = g as f64 * group_separation;
                        out.push(Blob {
                            center,
                            size: *n_per_blob,
                            sigma: *sigma,
                            label: format!("g{g}b{b}"),
                            group: Some(format!("g{g}")),
                        });
                    }
                }
                out
            }
            SyntheticSpec::Blobs { blobs } => blobs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    /// Fine labels are stored on the documents.
    pub corpus: Corpus,
    pub fine: Vec<String>,
    pub coarse: Option<Vec<String>>,
}

/// Points are generated blob by blob; labels are the blob labels, texts
/// name the blob so the annotation stage has something to read.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus, SynthError> {
    let blobs = spec.blobs();
    if blobs.is_empty() {
        return Err(SynthError::Degenerate("no blobs".into()));
    }
    let dim = blobs[0].center.len();
    if dim == 0 {
        return Err(SynthError::Degenerate("zero-dimensional blob center".into()));
    }
    for (i, b) in blobs.iter().enumerate() {
        if b.center.len() != dim {
            return Err(SynthError::Degenerate(format!("blob {i} has dimension {}, expected {dim}", b.center.len())));
        }
        if b.size == 0 {
            return Err(SynthError::Degenerate(format!("blob {i} is empty")));
        }
        if !(b.sigma.is_finite() && b.sigma > 0.0) || b.center.iter().any(|c| !c.is_finite()) {
            return Err(SynthError::Degenerate(format!("blob {i} needs a positive spread and a finite center")));
        }
    }
    let grouped = blobs.iter().any(|b| b.group.is_some());
    if grouped && blobs.iter().any(|b| b.group.is_none()) {
        return Err(SynthError::Degenerate("either all blobs or none carry a group".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut documents = Vec::new();
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    for blob in &blobs {
        let normal = Normal::new(0.0, blob.sigma).expect("validated spread");
        for k in 0..blob.size {
            let row: Vec<f64> = blob.center.iter().map(|c| c + normal.sample(&mut rng)).collect();
            let id = rows.len();
            rows.push(row);
            documents.push(Document {
                id,
                external_id: format!("doc{id}"),
                text: Some(format!("Synthetic document {k} drawn from blob {}.", blob.label)),
                label: Some(blob.label.clone()),
            });
            fine.push(blob.label.clone());
            if let Some(g) = &blob.group {
                coarse.push(g.clone());
            }
        }
    }
    let matrix = EmbeddingMatrix::from_rows(&rows)?;
    Ok(SyntheticCorpus {
        corpus: Corpus::new(documents, matrix)?,
        fine,
        coarse: grouped.then_some(coarse),
    })
}
