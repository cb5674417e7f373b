//! Stage functions and the composite `run`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semtree::annotation::{annotate_tree, transcribe_labels, AnnotationConfig, AnnotationRun, Annotator, PromptTemplates};
use semtree::client::{ClientConfig, CompletionClient, HttpChatClient, MockClient};
use semtree::color::{color_annotations, color_by_label, ColorScheme, Palette};
use semtree::corpus::{load_corpus, load_labels, sidecar_path, write_matrix, EmbeddingMatrix};
use semtree::index::NeighborIndex;
use semtree::metrics::{score_layers, LayerScore};
use semtree::newick::{sanitize_label, to_newick};
use semtree::tree::BuildReport;
use semtree::{build_tree_with_report, compute_pca, save_corpus, Corpus, DbscanParams, SemanticTree};

use crate::config::{AnnotateConfig, ColorConfig, EndpointConfig, PipelineConfig};
use crate::error::CliError;
use crate::synth::make_synthetic;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Corpus plus every label vector to score against, the primary one first.
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub label_sets: Vec<(String, Vec<String>)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

/// One label per line, in document order.
pub fn read_label_lines(path: &Path, n: usize) -> Result<Vec<String>, CliError> {
    let labels: Vec<String> = read_text(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if labels.len() != n {
        return Err(CliError::Data(format!(
            "{} has {} labels for {n} documents",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn load_input(
    embeddings: &Path,
    metadata: Option<&Path>,
    labels: Option<&Path>,
    extra: &BTreeMap<String, PathBuf>,
) -> Result<LoadedCorpus, CliError> {
    let meta = metadata.map(Path::to_path_buf).or_else(|| {
        let side = sidecar_path(embeddings);
        side.exists().then_some(side)
    });
    let mut corpus = load_corpus(embeddings, meta.as_deref()).map_err(CliError::data)?;
    if let Some(path) = labels {
        corpus = load_labels(path, &corpus).map_err(CliError::data)?.0;
    }
    let mut label_sets = Vec::new();
    if let Some(l) = corpus.labels() {
        label_sets.push(("label".to_string(), l));
    }
    for (name, path) in extra {
        label_sets.push((name.clone(), read_label_lines(path, corpus.len())?));
    }
    Ok(LoadedCorpus { corpus, label_sets })
}

/// PCA narrowed to `f32`, the form later stages read back from disk.
pub fn project(matrix: &EmbeddingMatrix, k: usize) -> Result<(EmbeddingMatrix, Vec<f64>, f64), CliError> {
    let space = compute_pca(matrix, k).map_err(|e| CliError::stage("pca", e))?;
    let projected = space.to_matrix().map_err(|e| CliError::stage("pca", e))?;
    Ok((projected, space.explained_variance, space.total_variance))
}

pub fn grow_tree(matrix: &EmbeddingMatrix, params: &DbscanParams) -> Result<(SemanticTree, BuildReport), CliError> {
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let index = NeighborIndex::from_matrix(matrix, params.metric).map_err(|e| CliError::stage("tree", e))?;
    let (tree, report) = build_tree_with_report(&index, params).map_err(|e| CliError::stage("tree", e))?;
    for p in &report.passes {
        debug!(
            "pass {} epsilon {} clusters {} noise {}{}",
            p.pass,
            p.epsilon,
            p.cluster_count,
            p.noise_count,
            if p.stored { " (stored)" } else { "" }
        );
    }
    info!(
        "{} passes, {} stored layers{}",
        tree.passes(),
        tree.layers().len(),
        if tree.has_synthetic_root() { ", synthetic root" } else { "" }
    );
    Ok((tree, report))
}

/// `labels layer epsilon covered ari nmi`, one block per label vector.
pub fn score_table(tree: &SemanticTree, label_sets: &[(String, Vec<String>)]) -> Result<String, CliError> {
    let mut out = String::from("labels\tlayer\tepsilon\tcovered\tari\tnmi\n");
    for (name, labels) in label_sets {
        let scores: Vec<LayerScore> = score_layers(tree, labels).map_err(|e| CliError::stage("score", e))?;
        for s in scores {
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\t{}\n",
                s.layer_index, s.epsilon, s.covered_count, s.ari, s.nmi
            ));
        }
    }
    Ok(out)
}

pub fn newick_text(tree: &SemanticTree, corpus: Option<&Corpus>) -> String {
    let ids: Option<Vec<String>> = corpus.map(|c| c.documents().iter().map(|d| d.external_id.clone()).collect());
    to_newick(tree, tree.attach_documents(), ids.as_deref())
}

pub fn palette(config: &ColorConfig) -> Result<Palette, CliError> {
    let mut p = Palette::default();
    if let Some(scheme) = &config.scheme {
        p.scheme = match scheme.as_str() {
            "twotone" => ColorScheme::TwoTone,
            "single" => ColorScheme::Single,
            other => return Err(CliError::Usage(format!("unknown color scheme {other:?}"))),
        };
    }
    if let Some(c) = &config.blue {
        p.blue = c.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    }
    if let Some(c) = &config.orange {
        p.orange = c.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    }
    Ok(p)
}

/// Annotation body per target, keyed by file name.
pub fn color_files(
    tree: &SemanticTree,
    labels: &[String],
    targets: &[String],
    palette: &Palette,
) -> Result<Vec<(String, String)>, CliError> {
    targets
        .iter()
        .map(|t| {
            let map = color_by_label(tree, labels, t, palette).map_err(|e| CliError::stage("color", e))?;
            Ok((format!("{}.tsv", sanitize_label(t)), color_annotations(&map)))
        })
        .collect()
}

fn http_client(endpoint: Option<&EndpointConfig>, role: &str) -> Result<HttpChatClient, CliError> {
    let endpoint =
        endpoint.ok_or_else(|| CliError::Usage(format!("annotate.{role} endpoint is required for the http client")))?;
    let mut config = match &endpoint.url {
        Some(url) => {
            let mut c = ClientConfig::new(url.clone(), endpoint.model.clone());
            c.token = std::env::var(semtree::client::ENV_TOKEN).ok();
            c
        }
        None => ClientConfig::from_env(endpoint.model.clone()).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    config.temperature = endpoint.temperature;
    config.seed = endpoint.seed;
    HttpChatClient::new(config).map_err(|e| CliError::Usage(e.to_string()))
}

type ClientPair = (Box<dyn CompletionClient>, Box<dyn CompletionClient>);

/// Primary and repair clients for `config`.
pub fn make_clients(config: &AnnotateConfig, seed: u64) -> Result<ClientPair, CliError> {
    match config.client.as_str() {
        "mock" => Ok((Box::new(MockClient::new(seed)), Box::new(MockClient::new(seed)))),
        "http" => Ok((
            Box::new(http_client(config.primary.as_ref(), "primary")?),
            Box::new(http_client(config.repair.as_ref().or(config.primary.as_ref()), "repair")?),
        )),
        other => Err(CliError::Usage(format!("unknown annotation client {other:?}"))),
    }
}

pub fn annotation_config(config: &AnnotateConfig, seed: u64) -> Result<AnnotationConfig, CliError> {
    let prompts = match &config.prompts_dir {
        Some(dir) => PromptTemplates::from_dir(dir).map_err(CliError::data)?,
        None => PromptTemplates::default(),
    };
    let c = AnnotationConfig {
        chunk_limit: config.chunk_limit,
        oversample_factor: config.oversample_factor,
        token_budget: config.token_budget,
        concurrency: config.concurrency,
        seed,
        prompts,
        ..AnnotationConfig::default()
    };
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// Annotates into `ledger`, resuming from it. Returns the run and, with a
/// taxonomy, the `label<TAB>category` table.
pub fn annotate_stage(
    tree: &SemanticTree,
    corpus: &Corpus,
    config: &AnnotateConfig,
    seed: u64,
    ledger: &Path,
) -> Result<(AnnotationRun, Option<String>), CliError> {
    let settings = annotation_config(config, seed)?;
    let (primary, repair) = make_clients(config, seed)?;
    let annotator = Annotator::new(primary.as_ref(), repair.as_ref(), settings.clone())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let run = annotate_tree(tree, corpus, &annotator, config.layers.as_deref(), Some(ledger))
        .map_err(|e| CliError::stage("annotate", e))?;
    for (node, e) in &run.failures {
        warn!("node {node}: {e}");
    }
    if !run.failures.is_empty() {
        return Err(CliError::stage(
            "annotate",
            format!(
                "{} of {} nodes failed; completed nodes are kept in {}",
                run.failures.len(),
                run.failures.len() + run.records.len(),
                ledger.display()
            ),
        ));
    }
    let table = match &config.taxonomy {
        None => None,
        Some(path) => {
            let taxonomy: Vec<String> = read_text(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            let labels: Vec<String> = run.records.iter().map(|r| r.label.clone()).collect();
            let t = transcribe_labels(&labels, &taxonomy, repair.as_ref(), &settings)
                .map_err(|e| CliError::stage("annotate", e))?;
            for (label, e) in &t.failures {
                warn!("transcription of {label:?} failed: {e}");
            }
            let mut s = String::from("label\tcategory\n");
            for (label, category) in &t.map {
                s.push_str(&format!("{}\t{category}\n", label.replace('\t', " ")));
            }
            Some(s)
        }
    };
    Ok((run, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub files: Vec<ArtifactFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub epsilon: f64,
    pub clusters: usize,
    pub noise: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub inputs: Vec<InputFile>,
    pub documents: usize,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explained_variance: Option<Vec<f64>>,
    pub passes: usize,
    pub synthetic_root: bool,
    pub layers: Vec<LayerSummary>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    artifacts: Vec<Artifact>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, files: &[(&str, &[u8])]) -> Result<(), CliError> {
        for (rel, bytes) in files {
            let path = self.dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(CliError::data)?;
            }
            write_file(&path, bytes)?;
        }
        self.record(name, &files.iter().map(|(rel, _)| *rel).collect::<Vec<_>>())
    }

    /// Hash files already on disk.
    fn record(&mut self, name: &str, rels: &[&str]) -> Result<(), CliError> {
        let mut files = Vec::new();
        for rel in rels {
            let bytes = fs::read(self.dir.join(rel)).map_err(CliError::data)?;
            files.push(ArtifactFile {
                path: rel.to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        self.artifacts.push(Artifact {
            name: name.to_string(),
            files,
        });
        Ok(())
    }
}

fn input_entry(path: &Path) -> Result<InputFile, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Runs every configured stage into `config.output_dir` and writes
/// `manifest.json` there.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest, CliError> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut out = Outputs {
        dir,
        artifacts: Vec::new(),
    };
    let mut inputs = Vec::new();

    info!("stage corpus");
    let loaded = match (&config.synthetic, &config.input.embeddings) {
        (Some(spec), _) => {
            let synth = make_synthetic(spec, config.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            save_corpus(&synth.corpus, &dir.join("corpus.semt")).map_err(CliError::data)?;
            let mut rels = vec!["corpus.semt", "corpus.semt.meta"];
            let mut label_sets = vec![("label".to_string(), synth.fine.clone())];
            if let Some(coarse) = &synth.coarse {
                write_file(&dir.join("corpus.coarse.labels"), (coarse.join("\n") + "\n").as_bytes())?;
                rels.push("corpus.coarse.labels");
                label_sets.push(("coarse".to_string(), coarse.clone()));
            }
            out.record("corpus", &rels)?;
            LoadedCorpus {
                corpus: synth.corpus,
                label_sets,
            }
        }
        (None, Some(embeddings)) => {
            let i = &config.input;
            for p in [Some(embeddings), i.metadata.as_ref(), i.labels.as_ref()].into_iter().flatten() {
                inputs.push(input_entry(p)?);
            }
            for p in i.extra_labels.values() {
                inputs.push(input_entry(p)?);
            }
            load_input(embeddings, i.metadata.as_deref(), i.labels.as_deref(), &i.extra_labels)?
        }
        (None, None) => unreachable!("validated"),
    };
    let corpus = &loaded.corpus;

    let mut explained_variance = None;
    let tree_input = match config.projection.k {
        Some(k) => {
            info!("stage pca (k = {k})");
            let (projected, variance, _) = project(corpus.matrix(), k)?;
            write_matrix(&projected, &dir.join("projected.semt")).map_err(CliError::data)?;
            out.record("projected", &["projected.semt"])?;
            explained_variance = Some(variance);
            projected
        }
        None => corpus.matrix().clone(),
    };

    info!("stage tree");
    let (tree, _) = grow_tree(&tree_input, &config.tree_params())?;
    out.write("tree", &[("tree.txt", tree.to_text().as_bytes())])?;

    if !loaded.label_sets.is_empty() {
        info!("stage score");
        let table = score_table(&tree, &loaded.label_sets)?;
        out.write("scores", &[("scores.tsv", table.as_bytes())])?;
    }

    info!("stage newick");
    let newick = newick_text(&tree, config.newick.document_leaves.then_some(corpus));
    out.write("newick", &[("tree.nwk", newick.as_bytes())])?;

    if let Some((_, labels)) = loaded.label_sets.first() {
        info!("stage color");
        let targets = if config.color.targets.is_empty() {
            let mut vocab: Vec<&String> = labels.iter().collect();
            vocab.sort();
            vec![vocab[0].clone()]
        } else {
            config.color.targets.clone()
        };
        let files = color_files(&tree, labels, &targets, &palette(&config.color)?)?;
        let named: Vec<(String, &[u8])> = files
            .iter()
            .map(|(f, body)| (format!("colors/{f}"), body.as_bytes()))
            .collect();
        let refs: Vec<(&str, &[u8])> = named.iter().map(|(f, b)| (f.as_str(), *b)).collect();
        out.write("colors", &refs)?;
    }

    if let Some(annotate) = &config.annotate {
        info!("stage annotate");
        let ledger = dir.join("annotations.tsv");
        let (_, table) = annotate_stage(&tree, corpus, annotate, config.seed, &ledger)?;
        match table {
            Some(t) => {
                write_file(&dir.join("categories.tsv"), t.as_bytes())?;
                out.record("annotations", &["annotations.tsv", "categories.tsv"])?;
            }
            None => out.record("annotations", &["annotations.tsv"])?,
        }
    }

    let manifest = Manifest {
        tool: "semtree".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config: config.clone(),
        inputs,
        documents: corpus.len(),
        dimension: corpus.matrix().d(),
        explained_variance,
        passes: tree.passes(),
        synthetic_root: tree.has_synthetic_root(),
        layers: tree
            .layers()
            .iter()
            .map(|l| LayerSummary {
                epsilon: l.epsilon,
                clusters: l.cluster_count,
                noise: l.noise_count(),
            })
            .collect(),
        artifacts: out.artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(CliError::data)? + "\n";
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}
