//! Pipeline configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semtree::dbscan::DEFAULT_MAX_ITERATIONS;
use semtree::{DbscanParams, Metric};

use crate::error::CliError;
use crate::synth::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub input: InputConfig,
    /// Generate the corpus instead of reading `input.embeddings`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub projection: ProjectionConfig,
    pub tree: TreeConfig,
    #[serde(default)]
    pub color: ColorConfig,
    #[serde(default)]
    pub newick: NewickConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotate: Option<AnnotateConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("semtree-out")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Sidecar metadata; defaults to `<embeddings>.meta` when that exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    /// Reference labels, replacing any in the metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Further label vectors to score against, by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_labels: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    /// PCA components; unset clusters the full vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Defaults to `l2` after PCA and `cosine` on full vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    pub epsilon0: f64,
    pub delta_epsilon: f64,
    pub minpts: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorConfig {
    /// Labels to color by; defaults to the first label of the vocabulary.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<String>,
    /// `twotone` or `single`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orange: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewickConfig {
    /// Emit one leaf per document under its attachment node.
    #[serde(default = "yes")]
    pub document_leaves: bool,
}

impl Default for NewickConfig {
    fn default() -> Self {
        Self { document_leaves: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Falls back to `SEMTREE_LLM_URL`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    /// `mock` (offline, deterministic) or `http`.
    #[serde(default = "default_client")]
    pub client: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_chunk_limit")]
    pub chunk_limit: usize,
    #[serde(default = "default_oversample")]
    pub oversample_factor: usize,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Category list, one per line; adds a label-to-category map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
}

fn default_client() -> String {
    "mock".into()
}

fn default_chunk_limit() -> usize {
    semtree::annotation::DEFAULT_CHUNK_LIMIT
}

fn default_oversample() -> usize {
    semtree::annotation::DEFAULT_OVERSAMPLE_FACTOR
}

fn default_budget() -> usize {
    semtree::annotation::DEFAULT_TOKEN_BUDGET
}

fn default_concurrency() -> usize {
    semtree::annotation::DEFAULT_CONCURRENCY
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            client: default_client(),
            primary: None,
            repair: None,
            prompts_dir: None,
            layers: None,
            chunk_limit: default_chunk_limit(),
            oversample_factor: default_oversample(),
            token_budget: default_budget(),
            concurrency: default_concurrency(),
            taxonomy: None,
        }
    }
}

/// Values given on the command line win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub pca_k: Option<usize>,
    pub metric: Option<Metric>,
    pub epsilon0: Option<f64>,
    pub delta_epsilon: Option<f64>,
    pub minpts: Option<usize>,
    pub max_iterations: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_relative_to(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Rebase relative paths on the directory holding the config file.
    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.input.embeddings, &mut self.input.metadata, &mut self.input.labels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.input.extra_labels.values_mut().for_each(fix);
        if let Some(a) = &mut self.annotate {
            for p in [&mut a.prompts_dir, &mut a.taxonomy].into_iter().flatten() {
                fix(p);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.embeddings {
            self.input.embeddings = Some(v.clone());
            self.synthetic = None;
        }
        if let Some(v) = &o.labels {
            self.input.labels = Some(v.clone());
        }
        if let Some(v) = o.pca_k {
            self.projection.k = Some(v);
        }
        if let Some(v) = o.metric {
            self.tree.metric = Some(v);
        }
        if let Some(v) = o.epsilon0 {
            self.tree.epsilon0 = v;
        }
        if let Some(v) = o.delta_epsilon {
            self.tree.delta_epsilon = v;
        }
        if let Some(v) = o.minpts {
            self.tree.minpts = v;
        }
        if let Some(v) = o.max_iterations {
            self.tree.max_iterations = v;
        }
    }

    pub fn metric(&self) -> Metric {
        self.tree.metric.unwrap_or(match self.projection.k {
            Some(_) => Metric::L2,
            None => Metric::Cosine,
        })
    }

    pub fn tree_params(&self) -> DbscanParams {
        DbscanParams {
            max_iterations: self.tree.max_iterations,
            ..DbscanParams::new(self.tree.epsilon0, self.tree.delta_epsilon, self.tree.minpts, self.metric())
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tree_params()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.projection.k == Some(0) {
            return Err(CliError::Usage("projection.k must be positive".into()));
        }
        match (&self.input.embeddings, &self.synthetic) {
            (None, None) => Err(CliError::Usage("config needs input.embeddings or a [synthetic] section".into())),
            (Some(_), Some(_)) => Err(CliError::Usage("input.embeddings and [synthetic] are mutually exclusive".into())),
            _ => Ok(()),
        }?;
        if let Some(a) = &self.annotate {
            if a.client != "mock" && a.client != "http" {
                return Err(CliError::Usage(format!("unknown annotation client {:?}", a.client)));
            }
        }
        Ok(())
    }
}
