//! Pipeline orchestration for `semtree`: configuration, synthetic corpora,
//! stage functions and the reproducible composite run.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;
pub mod synth;

pub use config::{Overrides, PipelineConfig};
pub use error::CliError;
pub use pipeline::{run_pipeline, Manifest};
pub use synth::{make_synthetic, SyntheticCorpus, SyntheticSpec};
