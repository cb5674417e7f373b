use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use semtree::corpus::{load_corpus_auto, read_matrix, read_metadata, sidecar_path, write_matrix};
use semtree::embed::{EmbeddingClient, EmbeddingClientConfig};
use semtree::{save_corpus, Corpus, EmbeddingMatrix, Metric, SemanticTree};
use semtree_cli::config::{AnnotateConfig, ColorConfig, EndpointConfig};
use semtree_cli::pipeline::{
    annotate_stage, color_files, grow_tree, load_input, newick_text, palette, project, score_table,
};
use semtree_cli::sweep::{param_sweep, sweep_to_tsv};
use semtree_cli::{make_synthetic, run_pipeline, CliError, Overrides, PipelineConfig, SyntheticSpec};

#[derive(Parser)]
#[command(name = "semtree", version, about = "Multi-scale semantic trees from document embeddings")]
struct Cli {
    /// -v for stage progress, -vv for per-pass cluster counts.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate embeddings (and optional metadata/labels) into the corpus format.
    Ingest(IngestArgs),
    /// Reduce a corpus to k principal components.
    Pca(PcaArgs),
    /// Build the semantic tree.
    Tree(TreeArgs),
    /// Score every tree layer against reference labels.
    Score(ScoreArgs),
    /// Export the tree as Newick.
    Newick(NewickArgs),
    /// Color tree nodes by the share of a label.
    Color(ColorArgs),
    /// Label tree nodes with a language model.
    Annotate(AnnotateArgs),
    /// Generate a seeded Gaussian-blob corpus.
    Synth(SynthArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
    /// Build trees over a parameter grid and summarize them.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Embedding file: binary corpus format, or text with one
    /// whitespace- or comma-separated row per line when --text-matrix is set.
    #[arg(long, required_unless_present = "fetch_url")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    text_matrix: bool,
    /// Metadata table (external_id, label, text per line).
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Embed the metadata texts through this embeddings endpoint instead.
    #[arg(long, requires = "meta")]
    fetch_url: Option<String>,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TreeParamArgs {
    #[arg(long)]
    eps0: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    minpts: usize,
    /// l2 or cosine.
    #[arg(long, default_value = "l2")]
    metric: Metric,
    #[arg(long, default_value_t = semtree::dbscan::DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
}

#[derive(Args)]
struct TreeArgs {
    /// Matrix to cluster (usually the PCA output).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    params: TreeParamArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-pass cluster counts and query work here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Corpus whose metadata labels are the reference.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Label file, one per line or external_id<TAB>label; needs --corpus
    /// for the keyed form.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Further label vectors as name=path, one label per line.
    #[arg(long = "extra", value_parser = parse_named_path)]
    extra: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NewickArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Adds one leaf per document, named by its external id.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ColorArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Repeat for several labels; --out is then a directory.
    #[arg(long, required = true)]
    target: Vec<String>,
    /// twotone or single.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    blue: Option<String>,
    #[arg(long)]
    orange: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Corpus with texts in its metadata.
    #[arg(long)]
    corpus: PathBuf,
    /// Append-only record of finished nodes; reruns resume from it.
    #[arg(long)]
    ledger: PathBuf,
    /// Comma-separated layer indices; all layers when absent.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// mock or http.
    #[arg(long, default_value = "mock")]
    client: String,
    /// Endpoint URL; defaults to SEMTREE_LLM_URL.
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    repair_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = semtree::annotation::DEFAULT_CONCURRENCY)]
    concurrency: usize,
    #[arg(long, default_value_t = semtree::annotation::DEFAULT_CHUNK_LIMIT)]
    chunk_limit: usize,
    /// Category list, one per line; writes label<TAB>category to --categories-out.
    #[arg(long, requires = "categories_out")]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    categories_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// corners or hierarchy; ignored with --spec.
    #[arg(long, default_value = "corners")]
    preset: String,
    /// TOML blob specification, overriding the preset flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    n_per_blob: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    blobs_per_group: usize,
    #[arg(long, default_value_t = 10.0)]
    group_separation: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    minpts: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    /// Corpus supplying reference labels for the best-ARI column.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    #[arg(long, value_delimiter = ',', required = true)]
    eps0: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    minpts: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    max_iterations: usize,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn write_out(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::data)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_tree(path: &Path) -> Result<SemanticTree, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    SemanticTree::from_text(&text).map_err(CliError::data)
}

fn check_sizes(tree: &SemanticTree, corpus: &Corpus) -> Result<(), CliError> {
    if tree.len() != corpus.len() {
        return Err(CliError::Data(format!(
            "tree has {} points but corpus has {} documents",
            tree.len(),
            corpus.len()
        )));
    }
    Ok(())
}

fn read_text_matrix(path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    EmbeddingMatrix::from_rows(&rows).map_err(CliError::data)
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let mut corpus = if let Some(url) = &a.fetch_url {
        let meta = a.meta.as_deref().expect("clap requires --meta");
        let documents = read_metadata(meta).map_err(CliError::data)?;
        let texts = documents
            .iter()
            .map(|d| {
                d.text
                    .clone()
                    .ok_or_else(|| CliError::Data(format!("document {} has no text to embed", d.external_id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut config = EmbeddingClientConfig::new(url.clone(), a.model.clone());
        config.token = std::env::var(semtree::client::ENV_TOKEN).ok();
        let client = EmbeddingClient::new(config).map_err(|e| CliError::Usage(e.to_string()))?;
        let matrix = client.embed(&texts).map_err(|e| CliError::stage("ingest", e))?;
        Corpus::new(documents, matrix).map_err(CliError::data)?
    } else {
        let path = a.embeddings.as_deref().expect("clap requires --embeddings");
        if a.text_matrix {
            let matrix = read_text_matrix(path)?;
            match &a.meta {
                Some(meta) => Corpus::new(read_metadata(meta).map_err(CliError::data)?, matrix).map_err(CliError::data)?,
                None => Corpus::from_matrix(matrix),
            }
        } else {
            load_input(path, a.meta.as_deref(), None, &BTreeMap::new())?.corpus
        }
    };
    if let Some(labels) = &a.labels {
        corpus = semtree::load_labels(labels, &corpus).map_err(CliError::data)?.0;
    }
    save_corpus(&corpus, &a.out).map_err(CliError::data)?;
    println!(
        "{} documents, dimension {}, labels: {}, texts: {}",
        corpus.len(),
        corpus.matrix().d(),
        corpus.has_labels(),
        corpus.has_texts()
    );
    Ok(())
}

fn pca(a: PcaArgs) -> Result<(), CliError> {
    let matrix = read_matrix(&a.corpus).map_err(CliError::data)?;
    let (projected, variance, total) = project(&matrix, a.k)?;
    write_matrix(&projected, &a.out).map_err(CliError::data)?;
    for (j, v) in variance.iter().enumerate() {
        println!("component {j}\tvariance {v}\tratio {}", if total > 0.0 { v / total } else { 0.0 });
    }
    Ok(())
}

fn tree_params(p: &TreeParamArgs) -> semtree::DbscanParams {
    semtree::DbscanParams {
        max_iterations: p.max_iterations,
        ..semtree::DbscanParams::new(p.eps0, p.delta, p.minpts, p.metric)
    }
}

fn tree(a: TreeArgs) -> Result<(), CliError> {
    let matrix = read_matrix(&a.input).map_err(CliError::data)?;
    let (tree, report) = grow_tree(&matrix, &tree_params(&a.params))?;
    write_out(&a.out, tree.to_text().as_bytes())?;
    if let Some(path) = &a.report {
        let mut s = String::from("pass\tepsilon\tclusters\tnoise\tstored\tqueries\tdistance_evals\tnode_visits\n");
        for p in &report.passes {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                p.pass, p.epsilon, p.cluster_count, p.noise_count, p.stored, p.work.queries, p.work.distance_evals, p.work.node_visits
            ));
        }
        write_out(path, s.as_bytes())?;
    }
    for l in tree.layers() {
        println!("layer {}\tepsilon {}\tclusters {}\tnoise {}", l.layer_index, l.epsilon, l.cluster_count, l.noise_count());
    }
    if tree.has_synthetic_root() {
        println!("max_iterations reached; root layer is synthetic");
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), CliError> {
    let tree = read_tree(&a.tree)?;
    let mut label_sets = Vec::new();
    match (&a.corpus, &a.labels) {
        (Some(c), labels) => {
            let loaded = load_input(c, None, labels.as_deref(), &BTreeMap::new())?;
            check_sizes(&tree, &loaded.corpus)?;
            label_sets.extend(loaded.label_sets);
        }
        (None, Some(l)) => label_sets.push(("label".into(), semtree_cli::pipeline::read_label_lines(l, tree.len())?)),
        (None, None) => {}
    }
    for (name, path) in &a.extra {
        label_sets.push((name.clone(), semtree_cli::pipeline::read_label_lines(path, tree.len())?));
    }
    if label_sets.is_empty() {
        return Err(CliError::Usage("no reference labels: pass --corpus with labels, --labels or --extra".into()));
    }
    let table = score_table(&tree, &label_sets)?;
    write_out(&a.out, table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn newick(a: NewickArgs) -> Result<(), CliError> {
    let tree = read_tree(&a.tree)?;
    let corpus = match &a.corpus {
        Some(c) => {
            let corpus = load_corpus_auto(c).map_err(CliError::data)?;
            check_sizes(&tree, &corpus)?;
            Some(corpus)
        }
        None => None,
    };
    write_out(&a.out, newick_text(&tree, corpus.as_ref()).as_bytes())
}

fn color(a: ColorArgs) -> Result<(), CliError> {
    let tree = read_tree(&a.tree)?;
    let loaded = load_input(&a.corpus, None, a.labels.as_deref(), &BTreeMap::new())?;
    check_sizes(&tree, &loaded.corpus)?;
    let labels = loaded
        .label_sets
        .first()
        .map(|s| s.1.clone())
        .ok_or_else(|| CliError::Data("corpus has no labels; pass --labels".into()))?;
    let config = ColorConfig {
        targets: a.target.clone(),
        scheme: a.scheme,
        blue: a.blue,
        orange: a.orange,
    };
    let files = color_files(&tree, &labels, &a.target, &palette(&config)?)?;
    if let [(_, body)] = files.as_slice() {
        return write_out(&a.out, body.as_bytes());
    }
    for (name, body) in &files {
        write_out(&a.out.join(name), body.as_bytes())?;
    }
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<(), CliError> {
    let tree = read_tree(&a.tree)?;
    let corpus = load_corpus_auto(&a.corpus).map_err(CliError::data)?;
    check_sizes(&tree, &corpus)?;
    let endpoint = |model: Option<String>| {
        model.map(|model| EndpointConfig {
            url: a.url.clone(),
            model,
            temperature: 0.0,
            seed: Some(a.seed),
        })
    };
    let config = AnnotateConfig {
        client: a.client.clone(),
        repair: endpoint(a.repair_model.clone()),
        primary: endpoint(a.model.clone()),
        prompts_dir: a.prompts.clone(),
        layers: a.layers.clone(),
        chunk_limit: a.chunk_limit,
        concurrency: a.concurrency,
        taxonomy: a.taxonomy.clone(),
        ..AnnotateConfig::default()
    };
    let (run, table) = annotate_stage(&tree, &corpus, &config, a.seed, &a.ledger)?;
    info!("{} records, {} resumed from the ledger", run.records.len(), run.resumed);
    for r in &run.records {
        println!("{}\t{}{}\t{}", r.node, r.provenance, if r.degraded { "+degraded" } else { "" }, r.label);
    }
    if let (Some(t), Some(out)) = (table, &a.categories_out) {
        write_out(out, t.as_bytes())?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| CliError::Usage(format!("invalid spec: {e}")))?
        }
        None => match a.preset.as_str() {
            "corners" => SyntheticSpec::Corners {
                n_per_blob: a.n_per_blob,
                sigma: a.sigma,
                separation: a.separation,
            },
            "hierarchy" => SyntheticSpec::Hierarchy {
                groups: a.groups,
                blobs_per_group: a.blobs_per_group,
                n_per_blob: a.n_per_blob,
                sigma: a.sigma,
                blob_separation: a.separation,
                group_separation: a.group_separation,
                dim: a.dim,
            },
            other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
        },
    };
    let s = make_synthetic(&spec, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    save_corpus(&s.corpus, &a.out).map_err(CliError::data)?;
    if let Some(coarse) = &s.coarse {
        let mut path = a.out.clone().into_os_string();
        path.push(".coarse.labels");
        write_out(Path::new(&path), (coarse.join("\n") + "\n").as_bytes())?;
    }
    println!("{} documents written to {} and {}", s.corpus.len(), a.out.display(), sidecar_path(&a.out).display());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(&a.config)?;
    config.apply(&Overrides {
        seed: a.seed,
        output_dir: a.output_dir,
        embeddings: a.embeddings,
        labels: a.labels,
        pca_k: a.k,
        metric: a.metric,
        epsilon0: a.eps0,
        delta_epsilon: a.delta,
        minpts: a.minpts,
        max_iterations: a.max_iterations,
    });
    let manifest = run_pipeline(&config)?;
    for artifact in &manifest.artifacts {
        for f in &artifact.files {
            println!("{}\t{}\t{}", artifact.name, f.sha256, f.path);
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let matrix = read_matrix(&a.input).map_err(CliError::data)?;
    let labels = match &a.corpus {
        Some(c) => load_corpus_auto(c).map_err(CliError::data)?.labels(),
        None => None,
    };
    if labels.as_ref().is_some_and(|l| l.len() != matrix.n()) {
        return Err(CliError::Data("corpus and input differ in size".into()));
    }
    let rows = param_sweep(&matrix, a.metric, &a.eps0, &a.delta, &a.minpts, a.max_iterations, labels.as_deref())?;
    print!("{}", sweep_to_tsv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Pca(a) => pca(a),
        Command::Tree(a) => tree(a),
        Command::Score(a) => score(a),
        Command::Newick(a) => newick(a),
        Command::Color(a) => color(a),
        Command::Annotate(a) => annotate(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semtree: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
