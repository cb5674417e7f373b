//! Multi-scale semantic trees from document embeddings.
//!
//! DBSCAN is run repeatedly over a growing radius; each pass that finds
//! fewer clusters than the last stored one becomes a new tree layer, until
//! one cluster holds every document. Around that core the crate provides the
//! flat-file corpus store, PCA reduction, per-layer ARI/NMI scoring, Newick
//! and color export, and an LLM node-annotation protocol behind a pluggable
//! completion client.

pub mod annotation;
pub mod client;
pub mod color;
pub mod corpus;
pub mod dbscan;
pub mod embed;
pub mod index;
pub mod metrics;
pub mod newick;
pub mod projection;
pub mod tree;

pub use annotation::{
    annotate_tree, plan_chunks, reconcile, repair_label, transcribe_labels, AnnotationConfig, AnnotationRecord, Annotator,
    Provenance,
};
pub use client::{ClientConfig, CompletionClient, HttpChatClient, MockClient};
pub use corpus::{load_corpus, load_labels, save_corpus, Corpus, Document, EmbeddingMatrix};
pub use dbscan::{dbscan, ClusterLayer, DbscanParams, NOISE};
pub use index::{build_index, NeighborIndex};
pub use projection::{compute_pca, cosine_distance, l2_distance, Metric, ProjectedSpace};
pub use tree::{build_tree, build_tree_with_report, NodeId, SemanticTree};
