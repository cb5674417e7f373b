//! Node labeling through completion clients.
//!
//! A node's member texts go to the primary model in one prompt, or, when
//! there are more than `chunk_limit` of them, in `⌈factor·n / limit⌉`
//! independently sampled chunks whose labels one further call reconciles.
//! Any answer that is not a single line of at most 80 characters is handed
//! to the secondary (repair) model. Finished nodes are appended to a ledger
//! so an interrupted run picks up where it stopped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

use crate::client::{ChatMessage, ClientError, CompletionClient, CompletionRequest, Purpose};
use crate::corpus::{escape_field, unescape_field, Corpus};
use crate::tree::{NodeId, SemanticTree, TreeError};

pub const DEFAULT_CHUNK_LIMIT: usize = 1500;
pub const DEFAULT_OVERSAMPLE_FACTOR: usize = 3;
pub const DEFAULT_TOKEN_BUDGET: usize = 600_000;
pub const DEFAULT_ATTEMPTS: usize = 2;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const MAX_LABEL_CHARS: usize = 80;
pub const REPAIR_TAIL_CHARS: usize = 20_000;
/// Transcription result for labels the model never mapped onto the taxonomy.
pub const UNMAPPED: &str = "UNMAPPED";
/// Fallback label when an answer has no non-blank line at all.
pub const UNLABELED: &str = "UNLABELED";

const TEXTS_KEY: &str = "{texts}";
const LABELS_KEY: &str = "{labels}";
const ANSWER_KEY: &str = "{answer}";
const CATEGORIES_KEY: &str = "{categories}";
const LABEL_KEY: &str = "{label}";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("invalid annotation config: {0}")]
    InvalidConfig(String),
    #[error("corpus has {corpus} documents, tree has {tree} points")]
    SizeMismatch { corpus: usize, tree: usize },
    #[error("corpus has no texts")]
    NoCorpusTexts,
    #[error("node {0} has no member texts")]
    NoTexts(NodeId),
    #[error("{}empty model reply after {attempts} attempts", node_prefix(.node))]
    EmptyResponse { node: Option<NodeId>, attempts: usize },
    #[error("{}{source}", node_prefix(.node))]
    Client { node: Option<NodeId>, source: ClientError },
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("ledger line {line}: {reason}")]
    Ledger { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

fn node_prefix(node: &Option<NodeId>) -> String {
    node.map_or(String::new(), |n| format!("node {n}: "))
}

impl AnnotationError {
    /// Attach a node handle to call-level errors.
    pub fn at(self, node: NodeId) -> Self {
        match self {
            AnnotationError::EmptyResponse { attempts, .. } => AnnotationError::EmptyResponse {
                node: Some(node),
                attempts,
            },
            AnnotationError::Client { source, .. } => AnnotationError::Client {
                node: Some(node),
                source,
            },
            other => other,
        }
    }
}

/// Editable prompt texts. Placeholders: `{texts}` (infer), `{labels}`
/// (reconcile), `{answer}` (repair), `{categories}` and `{label}`
/// (transcribe).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplates {
    pub infer: String,
    pub reconcile: String,
    pub repair: String,
    pub transcribe: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            infer: include_str!("../assets/prompts/infer.txt").to_string(),
            reconcile: include_str!("../assets/prompts/reconcile.txt").to_string(),
            repair: include_str!("../assets/prompts/repair.txt").to_string(),
            transcribe: include_str!("../assets/prompts/transcribe.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Defaults, overridden by `infer.txt`, `reconcile.txt`, `repair.txt`
    /// and `transcribe.txt` where present in `dir`.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("infer.txt", &mut t.infer),
            ("reconcile.txt", &mut t.reconcile),
            ("repair.txt", &mut t.repair),
            ("transcribe.txt", &mut t.transcribe),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        for (name, template, keys) in [
            ("infer", &self.infer, &[TEXTS_KEY][..]),
            ("reconcile", &self.reconcile, &[LABELS_KEY][..]),
            ("repair", &self.repair, &[ANSWER_KEY][..]),
            ("transcribe", &self.transcribe, &[CATEGORIES_KEY, LABEL_KEY][..]),
        ] {
            for key in keys {
                if template.matches(key).count() != 1 {
                    return Err(AnnotationError::InvalidConfig(format!(
                        "{name} prompt must contain {key} exactly once"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationConfig {
    pub chunk_limit: usize,
    pub oversample_factor: usize,
    /// Prompt budget in estimated tokens (characters / 4).
    pub token_budget: usize,
    /// Calls per chunk or reconciliation before an empty reply is an error.
    pub attempts: usize,
    /// Repair calls before falling back to truncation.
    pub repair_attempts: usize,
    /// Upper bound on model calls in flight.
    pub concurrency: usize,
    pub seed: u64,
    pub prompts: PromptTemplates,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            chunk_limit: DEFAULT_CHUNK_LIMIT,
            oversample_factor: DEFAULT_OVERSAMPLE_FACTOR,
            token_budget: DEFAULT_TOKEN_BUDGET,
            attempts: DEFAULT_ATTEMPTS,
            repair_attempts: DEFAULT_ATTEMPTS,
            concurrency: DEFAULT_CONCURRENCY,
            seed: 0,
            prompts: PromptTemplates::default(),
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        for (name, v) in [
            ("chunk_limit", self.chunk_limit),
            ("oversample_factor", self.oversample_factor),
            ("token_budget", self.token_budget),
            ("attempts", self.attempts),
            ("concurrency", self.concurrency),
        ] {
            if v == 0 {
                return Err(AnnotationError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        self.prompts.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Direct,
    ChunkedReconciled,
    FallbackRepaired,
    ChunkedAndRepaired,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Direct => "direct",
            Provenance::ChunkedReconciled => "chunked_reconciled",
            Provenance::FallbackRepaired => "fallback_repaired",
            Provenance::ChunkedAndRepaired => "chunked_and_repaired",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Provenance::Direct),
            "chunked_reconciled" => Ok(Provenance::ChunkedReconciled),
            "fallback_repaired" => Ok(Provenance::FallbackRepaired),
            "chunked_and_repaired" => Ok(Provenance::ChunkedAndRepaired),
            _ => Err(format!("unknown provenance {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub node: NodeId,
    pub label: String,
    pub provenance: Provenance,
    /// Set when repair gave up and the label is a truncated raw answer.
    pub degraded: bool,
    /// Every model answer that went into the label, in call order. Empty for
    /// records read back from a ledger.
    pub raw_responses: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepairOutcome {
    pub label: String,
    /// A repair call was needed.
    pub repaired: bool,
    pub degraded: bool,
    pub transcripts: Vec<String>,
}

impl RepairOutcome {
    fn valid(label: String) -> Self {
        Self {
            label,
            repaired: false,
            degraded: false,
            transcripts: Vec::new(),
        }
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Single line, non-blank, at most 80 characters.
pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty() && !label.contains(['\n', '\r']) && label.chars().count() <= MAX_LABEL_CHARS
}

/// Sample plan for a node with `n` texts: one chunk holding every id when
/// `n <= limit`, otherwise `⌈factor·n / limit⌉` chunks of `limit` distinct
/// ids each, drawn independently. Ids within a chunk are ascending.
pub fn plan_chunks(n: usize, limit: usize, factor: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(limit > 0 && factor > 0, "chunk limit and factor must be positive");
    if n == 0 {
        return Vec::new();
    }
    if n <= limit {
        return vec![(0..n).collect()];
    }
    let chunks = chunk_count(n, limit, factor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..chunks)
        .map(|_| {
            let mut ids = rand::seq::index::sample(&mut rng, n, limit).into_vec();
            ids.sort_unstable();
            ids
        })
        .collect()
}

pub fn chunk_count(n: usize, limit: usize, factor: usize) -> usize {
    if n <= limit {
        usize::from(n > 0)
    } else {
        (factor as u128 * n as u128).div_ceil(limit as u128) as usize
    }
}

/// Replace each `{key}` in one left-to-right pass, so substituted values are
/// never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (key, value) in values {
            if let Some(after) = tail.strip_prefix(key) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn last_chars(s: &str, count: usize) -> &str {
    let total = s.chars().count();
    if total <= count {
        return s;
    }
    let (idx, _) = s.char_indices().nth(total - count).unwrap();
    &s[idx..]
}

fn first_chars(s: &str, count: usize) -> &str {
    match s.char_indices().nth(count) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

struct Fitted {
    prompt: String,
    /// Items that made it into the prompt, possibly the first one cut short.
    items: Vec<String>,
    dropped: usize,
    cut: bool,
}

/// Render `template` with as many leading items as the budget allows, each
/// as `[i] item`. If not even the first fits whole, it is cut to fit.
fn fit_items(template: &str, key: &str, items: &[&str], sep: &str, budget: usize) -> Fitted {
    let max_chars = budget.saturating_mul(4);
    let base = template.chars().count() - key.chars().count();
    let mut used = base;
    let mut body = String::new();
    let mut kept = Vec::new();
    let mut cut = false;
    for (i, item) in items.iter().enumerate() {
        let prefix = format!("{}[{}] ", if i > 0 { sep } else { "" }, i + 1);
        let prefix_len = prefix.chars().count();
        let len = item.chars().count();
        if used + prefix_len + len <= max_chars {
            used += prefix_len + len;
            body.push_str(&prefix);
            body.push_str(item);
            kept.push(item.to_string());
            continue;
        }
        if i == 0 && used + prefix_len < max_chars {
            let part = first_chars(item, max_chars - used - prefix_len);
            body.push_str(&prefix);
            body.push_str(part);
            kept.push(part.to_string());
            cut = true;
        }
        break;
    }
    Fitted {
        prompt: fill(template, &[(key, &body)]),
        dropped: items.len() - kept.len(),
        items: kept,
        cut,
    }
}

fn complete_nonempty(
    client: &dyn CompletionClient,
    request: &CompletionRequest,
    attempts: usize,
) -> Result<String, AnnotationError> {
    let mut last_error = None;
    for attempt in 1..=attempts {
        match client.complete(request) {
            Ok(reply) if !reply.trim().is_empty() => return Ok(reply),
            Ok(_) => {
                warn!("empty {:?} reply (attempt {attempt}/{attempts})", request.purpose);
                last_error = None;
            }
            Err(e) => {
                warn!("{:?} call failed (attempt {attempt}/{attempts}): {e}", request.purpose);
                last_error = Some(e);
            }
        }
    }
    Err(match last_error {
        Some(source) => AnnotationError::Client { node: None, source },
        None => AnnotationError::EmptyResponse { node: None, attempts },
    })
}

/// Ask the primary model for the field unifying `texts`. Trailing texts
/// that would push the prompt past the token budget are left out. Returns
/// the raw answer.
pub fn annotate_chunk(
    texts: &[&str],
    client: &dyn CompletionClient,
    config: &AnnotationConfig,
) -> Result<String, AnnotationError> {
    let fitted = fit_items(&config.prompts.infer, TEXTS_KEY, texts, "\n\n", config.token_budget);
    if fitted.dropped > 0 || fitted.cut {
        warn!(
            "prompt over budget of {} tokens: kept {} of {} texts{}",
            config.token_budget,
            fitted.items.len(),
            texts.len(),
            if fitted.cut { ", first text truncated" } else { "" }
        );
    }
    let request = CompletionRequest {
        purpose: Purpose::InferField,
        messages: vec![ChatMessage::user(fitted.prompt)],
        inputs: fitted.items,
    };
    complete_nonempty(client, &request, config.attempts)
}

/// Pass valid labels through trimmed and without a call. Otherwise send the
/// last 20 000 characters of `raw` to the repair model, up to
/// `repair_attempts` times, and fall back to the first 80 characters of the
/// first non-blank line of `raw`, flagged as degraded.
pub fn repair_label(raw: &str, client: &dyn CompletionClient, config: &AnnotationConfig) -> RepairOutcome {
    let trimmed = raw.trim();
    if is_valid_label(trimmed) {
        return RepairOutcome::valid(trimmed.to_string());
    }
    let template = &config.prompts.repair;
    let room = config
        .token_budget
        .saturating_mul(4)
        .saturating_sub(template.chars().count() - ANSWER_KEY.chars().count());
    let tail = last_chars(raw, REPAIR_TAIL_CHARS.min(room));
    let request = CompletionRequest {
        purpose: Purpose::Repair,
        messages: vec![ChatMessage::user(fill(template, &[(ANSWER_KEY, tail)]))],
        inputs: vec![tail.to_string()],
    };
    let mut transcripts = Vec::new();
    for attempt in 1..=config.repair_attempts {
        match client.complete(&request) {
            Ok(reply) => {
                let candidate = reply.trim().to_string();
                transcripts.push(reply);
                if is_valid_label(&candidate) {
                    return RepairOutcome {
                        label: candidate,
                        repaired: true,
                        degraded: false,
                        transcripts,
                    };
                }
                warn!("repair answer invalid (attempt {attempt}/{})", config.repair_attempts);
            }
            Err(e) => warn!("repair call failed (attempt {attempt}/{}): {e}", config.repair_attempts),
        }
    }
    RepairOutcome {
        label: truncation_fallback(raw),
        repaired: true,
        degraded: true,
        transcripts,
    }
}

/// First 80 characters of the first non-blank line.
pub fn truncation_fallback(raw: &str) -> String {
    raw.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(|l| first_chars(&l.replace('\r', " "), MAX_LABEL_CHARS).trim().to_string())
        .filter(|l| !l.is_empty())
        .unwrap_or_else(|| UNLABELED.to_string())
}

/// Merge chunk labels into one with a single call, then repair. A single
/// label is returned unchanged without a call.
pub fn reconcile(
    labels: &[String],
    client: &dyn CompletionClient,
    config: &AnnotationConfig,
) -> Result<RepairOutcome, AnnotationError> {
    match labels {
        [] => Err(AnnotationError::InvalidConfig("nothing to reconcile".into())),
        [only] => Ok(RepairOutcome::valid(only.clone())),
        _ => {
            let items: Vec<&str> = labels.iter().map(String::as_str).collect();
            let fitted = fit_items(&config.prompts.reconcile, LABELS_KEY, &items, "\n", config.token_budget);
            if fitted.dropped > 0 || fitted.cut {
                warn!("reconcile prompt over budget: kept {} of {} labels", fitted.items.len(), labels.len());
            }
            let request = CompletionRequest {
                purpose: Purpose::Reconcile,
                messages: vec![ChatMessage::user(fitted.prompt)],
                inputs: fitted.items,
            };
            let raw = complete_nonempty(client, &request, config.attempts)?;
            let mut outcome = repair_label(&raw, client, config);
            outcome.transcripts.insert(0, raw);
            Ok(outcome)
        }
    }
}

fn node_seed(seed: u64, node: NodeId) -> u64 {
    // splitmix64 finalizer over the seed and node handle
    let mut z = seed ^ (u64::from(node.layer) << 32 | u64::from(node.cluster));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn worker_pool(concurrency: usize) -> Result<Option<ThreadPool>, AnnotationError> {
    if concurrency <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .thread_name(|i| format!("annotate-{i}"))
        .build()
        .map(Some)
        .map_err(|e| AnnotationError::InvalidConfig(e.to_string()))
}

/// Order-preserving map, on the pool when there is one.
fn ordered_map<T, F>(pool: Option<&ThreadPool>, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
        None => (0..count).map(f).collect(),
    }
}

/// Primary and repair clients plus settings. Model calls in flight never
/// exceed `concurrency`.
pub struct Annotator<'a> {
    primary: &'a dyn CompletionClient,
    repair: &'a dyn CompletionClient,
    config: AnnotationConfig,
    pool: Option<ThreadPool>,
}

impl<'a> Annotator<'a> {
    pub fn new(
        primary: &'a dyn CompletionClient,
        repair: &'a dyn CompletionClient,
        config: AnnotationConfig,
    ) -> Result<Self, AnnotationError> {
        config.validate()?;
        let pool = worker_pool(config.concurrency)?;
        Ok(Self {
            primary,
            repair,
            config,
            pool,
        })
    }

    pub fn config(&self) -> &AnnotationConfig {
        &self.config
    }

    pub fn annotate_node(
        &self,
        tree: &SemanticTree,
        corpus: &Corpus,
        node: NodeId,
    ) -> Result<AnnotationRecord, AnnotationError> {
        match &self.pool {
            Some(pool) => pool.install(|| self.annotate_node_inner(tree, corpus, node)),
            None => self.annotate_node_inner(tree, corpus, node),
        }
    }

    fn annotate_node_inner(
        &self,
        tree: &SemanticTree,
        corpus: &Corpus,
        node: NodeId,
    ) -> Result<AnnotationRecord, AnnotationError> {
        let docs = corpus.documents();
        let texts: Vec<&str> = tree
            .node_members_sorted(node)?
            .into_iter()
            .filter_map(|i| docs[i].text.as_deref())
            .collect();
        if texts.is_empty() {
            return Err(AnnotationError::NoTexts(node));
        }
        let cfg = &self.config;
        let chunks = plan_chunks(texts.len(), cfg.chunk_limit, cfg.oversample_factor, node_seed(cfg.seed, node));
        if chunks.len() == 1 {
            let raw = annotate_chunk(&texts, self.primary, cfg).map_err(|e| e.at(node))?;
            let outcome = repair_label(&raw, self.repair, cfg);
            let mut raw_responses = vec![raw];
            raw_responses.extend(outcome.transcripts);
            return Ok(AnnotationRecord {
                node,
                label: outcome.label,
                provenance: if outcome.repaired {
                    Provenance::FallbackRepaired
                } else {
                    Provenance::Direct
                },
                degraded: outcome.degraded,
                raw_responses,
            });
        }
        let results = ordered_map(self.pool.as_ref(), chunks.len(), |c| {
            let chunk: Vec<&str> = chunks[c].iter().map(|&i| texts[i]).collect();
            let raw = annotate_chunk(&chunk, self.primary, cfg)?;
            let outcome = repair_label(&raw, self.repair, cfg);
            Ok::<_, AnnotationError>((raw, outcome))
        });
        let mut labels = Vec::with_capacity(results.len());
        let mut raw_responses = Vec::new();
        let mut repaired = false;
        let mut degraded = false;
        for result in results {
            let (raw, outcome) = result.map_err(|e| e.at(node))?;
            raw_responses.push(raw);
            raw_responses.extend(outcome.transcripts);
            repaired |= outcome.repaired;
            degraded |= outcome.degraded;
            labels.push(outcome.label);
        }
        let merged = reconcile(&labels, self.repair, cfg).map_err(|e| e.at(node))?;
        raw_responses.extend(merged.transcripts);
        Ok(AnnotationRecord {
            node,
            label: merged.label,
            provenance: if repaired || merged.repaired {
                Provenance::ChunkedAndRepaired
            } else {
                Provenance::ChunkedReconciled
            },
            degraded: degraded || merged.degraded,
            raw_responses,
        })
    }
}

#[derive(Debug)]
pub struct AnnotationRun {
    /// One record per selected node that succeeded, in node order.
    pub records: Vec<AnnotationRecord>,
    pub failures: Vec<(NodeId, AnnotationError)>,
    /// Records taken from the ledger rather than annotated.
    pub resumed: usize,
}

const DEGRADED_SUFFIX: &str = "+degraded";

/// `node<TAB>provenance<TAB>label`, with `+degraded` appended to the
/// provenance of truncation fallbacks and the label backslash-escaped.
pub fn ledger_line(record: &AnnotationRecord) -> String {
    format!(
        "{}\t{}{}\t{}\n",
        record.node,
        record.provenance,
        if record.degraded { DEGRADED_SUFFIX } else { "" },
        escape_field(&record.label)
    )
}

/// Complete ledger lines; an unterminated last line (a write cut short) is
/// ignored.
pub fn read_ledger(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = &text[..text.rfind('\n').map_or(0, |i| i + 1)];
    let mut records = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| AnnotationError::Ledger { line: i + 1, reason };
        let mut fields = line.splitn(3, '\t');
        let (Some(node), Some(prov), Some(label)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected three tab-separated fields".into()));
        };
        let node: NodeId = node.parse().map_err(bad)?;
        let (prov, degraded) = match prov.strip_suffix(DEGRADED_SUFFIX) {
            Some(p) => (p, true),
            None => (prov, false),
        };
        records.push(AnnotationRecord {
            node,
            provenance: prov.parse().map_err(bad)?,
            degraded,
            label: unescape_field(label, i + 1).map_err(|e| bad(e.to_string()))?,
            raw_responses: Vec::new(),
        });
    }
    Ok(records)
}

/// Open for appending, first dropping any unterminated last line.
fn open_ledger(path: &Path) -> Result<File, AnnotationError> {
    if let Ok(bytes) = fs::read(path) {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if keep < bytes.len() {
            warn!("dropping incomplete last ledger line in {}", path.display());
            OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
        }
    }
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Annotate every node, or only nodes of the layers in `layer_filter`.
/// With a ledger, nodes already recorded there are not queried again and new
/// records are appended in node order as they finish. Per-node failures are
/// collected in the result; the run continues with the other nodes.
pub fn annotate_tree(
    tree: &SemanticTree,
    corpus: &Corpus,
    annotator: &Annotator<'_>,
    layer_filter: Option<&[usize]>,
    ledger: Option<&Path>,
) -> Result<AnnotationRun, AnnotationError> {
    if corpus.len() != tree.len() {
        return Err(AnnotationError::SizeMismatch {
            corpus: corpus.len(),
            tree: tree.len(),
        });
    }
    if !corpus.has_texts() {
        return Err(AnnotationError::NoCorpusTexts);
    }
    if let Some(layers) = layer_filter {
        if let Some(&bad) = layers.iter().find(|&&l| l >= tree.layers().len()) {
            return Err(AnnotationError::InvalidConfig(format!(
                "layer {bad} does not exist; tree has {} layers",
                tree.layers().len()
            )));
        }
    }
    let wanted: Option<HashSet<usize>> = layer_filter.map(|l| l.iter().copied().collect());
    let selected: Vec<NodeId> = tree
        .nodes()
        .filter(|n| wanted.as_ref().is_none_or(|w| w.contains(&(n.layer as usize))))
        .collect();

    let mut done: BTreeMap<NodeId, AnnotationRecord> = BTreeMap::new();
    let mut file = None;
    if let Some(path) = ledger {
        let selected_set: BTreeSet<NodeId> = selected.iter().copied().collect();
        for record in read_ledger(path)? {
            if selected_set.contains(&record.node) {
                done.insert(record.node, record);
            }
        }
        file = Some(open_ledger(path)?);
    }
    let resumed = done.len();
    let pending: Vec<NodeId> = selected.iter().copied().filter(|n| !done.contains_key(n)).collect();
    info!(
        "annotating {} nodes ({} already in ledger)",
        pending.len(),
        resumed
    );

    let mut failures = Vec::new();
    let mut write_error = None;
    let mut commit = |index: usize, result: Result<AnnotationRecord, AnnotationError>| match result {
        Ok(record) => {
            if let Some(f) = file.as_mut() {
                if write_error.is_none() {
                    if let Err(e) = f.write_all(ledger_line(&record).as_bytes()).and_then(|_| f.flush()) {
                        write_error = Some(e);
                    }
                }
            }
            done.insert(record.node, record);
        }
        Err(e) => {
            warn!("annotation of {} failed: {e}", pending[index]);
            failures.push((pending[index], e));
        }
    };

    match &annotator.pool {
        None => {
            for (i, &node) in pending.iter().enumerate() {
                commit(i, annotator.annotate_node_inner(tree, corpus, node));
            }
        }
        Some(pool) => {
            let (tx, rx) = mpsc::channel();
            std::thread::scope(|s| {
                let pending = &pending;
                s.spawn(move || {
                    pool.install(|| {
                        pending.par_iter().enumerate().for_each_with(tx, |tx, (i, &node)| {
                            let _ = tx.send((i, annotator.annotate_node_inner(tree, corpus, node)));
                        })
                    })
                });
                // commit strictly in node order whatever the finishing order
                let mut waiting = BTreeMap::new();
                let mut next = 0;
                for (i, result) in rx {
                    waiting.insert(i, result);
                    while let Some(result) = waiting.remove(&next) {
                        commit(next, result);
                        next += 1;
                    }
                }
            });
        }
    }
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let records = selected.iter().filter_map(|n| done.remove(n)).collect();
    Ok(AnnotationRun {
        records,
        failures,
        resumed,
    })
}

#[derive(Debug, Default)]
pub struct Transcription {
    /// Every distinct input label to a taxonomy entry or [`UNMAPPED`].
    pub map: BTreeMap<String, String>,
    pub failures: Vec<(String, ClientError)>,
}

/// Map each distinct label onto one taxonomy category. An answer must equal
/// a category verbatim (after trimming); one retry, then [`UNMAPPED`].
pub fn transcribe_labels(
    labels: &[String],
    taxonomy: &[String],
    client: &dyn CompletionClient,
    config: &AnnotationConfig,
) -> Result<Transcription, AnnotationError> {
    if taxonomy.is_empty() {
        return Err(AnnotationError::EmptyTaxonomy);
    }
    config.validate()?;
    let unique: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let categories = taxonomy.iter().map(|c| format!("- {c}")).collect::<Vec<_>>().join("\n");
    let pool = worker_pool(config.concurrency)?;
    let results = ordered_map(pool.as_ref(), unique.len(), |i| {
        let label = unique[i];
        let mut inputs = vec![label.clone()];
        inputs.extend(taxonomy.iter().cloned());
        let request = CompletionRequest {
            purpose: Purpose::Transcribe,
            messages: vec![ChatMessage::user(fill(
                &config.prompts.transcribe,
                &[(CATEGORIES_KEY, &categories), (LABEL_KEY, label)],
            ))],
            inputs,
        };
        for _ in 0..2 {
            match client.complete(&request) {
                Ok(reply) => {
                    let answer = reply.trim();
                    if let Some(category) = taxonomy.iter().find(|c| c.as_str() == answer) {
                        return (category.clone(), None);
                    }
                }
                Err(e) => return (UNMAPPED.to_string(), Some(e)),
            }
        }
        (UNMAPPED.to_string(), None)
    });
    let mut out = Transcription::default();
    for (label, (category, failure)) in unique.into_iter().zip(results) {
        if let Some(e) = failure {
            out.failures.push((label.clone(), e));
        }
        out.map.insert(label.clone(), category);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::MockClient;

    #[test]
    fn chunk_counts() {
        assert_eq!(plan_chunks(1500, 1500, 3, 1).len(), 1);
        assert_eq!(plan_chunks(3000, 1500, 3, 1).len(), 6);
        assert_eq!(plan_chunks(1501, 1500, 3, 1).len(), 4);
        assert_eq!(plan_chunks(4000, 1500, 3, 1).len(), 8);
        assert!(plan_chunks(0, 1500, 3, 1).is_empty());
        for chunk in plan_chunks(3000, 1500, 3, 9) {
            assert_eq!(chunk.len(), 1500);
            assert!(chunk.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(plan_chunks(5000, 1500, 3, 4), plan_chunks(5000, 1500, 3, 4));
    }

    #[test]
    fn fill_is_single_pass() {
        let s = fill("a {x} b {y} {z}", &[("{x}", "{y}"), ("{y}", "Y")]);
        assert_eq!(s, "a {y} b Y {z}");
    }

    #[test]
    fn valid_labels_skip_repair() {
        let mock = MockClient::new(0);
        let cfg = AnnotationConfig::default();
        let out = repair_label("  Quantum Optics \n", &mock, &cfg);
        assert_eq!(out.label, "Quantum Optics");
        assert!(!out.repaired);
        assert_eq!(mock.call_count(), 0);
        let long = "x".repeat(81);
        let out = repair_label(&long, &mock, &cfg);
        assert_eq!(mock.call_count(), 1);
        assert!(out.repaired);
    }

    #[test]
    fn repair_gives_up_deterministically() {
        let mock = MockClient::with_script(0, |_, _| Some(Ok("still\nrambling".into())));
        let cfg = AnnotationConfig::default();
        let raw = format!("\n\n  {}  \nmore", "y".repeat(120));
        let out = repair_label(&raw, &mock, &cfg);
        assert_eq!(mock.call_count(), 2);
        assert!(out.degraded);
        assert_eq!(out.label, "y".repeat(80));
    }

    #[test]
    fn budget_cuts_trailing_texts() {
        let cfg = AnnotationConfig {
            token_budget: 200,
            ..AnnotationConfig::default()
        };
        let texts: Vec<String> = (0..50).map(|i| format!("text number {i} ").repeat(4)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let mock = MockClient::new(0);
        annotate_chunk(&refs, &mock, &cfg).unwrap();
        let req = &mock.requests()[0];
        assert!(estimate_tokens(&req.prompt()) <= 200);
        assert!(!req.inputs.is_empty() && req.inputs.len() < 50);
        assert_eq!(req.inputs[0], texts[0]);

        let huge = "z".repeat(10_000);
        annotate_chunk(&[huge.as_str()], &mock, &cfg).unwrap();
        assert!(estimate_tokens(&mock.requests()[1].prompt()) <= 200);
    }

    #[test]
    fn empty_replies_become_errors() {
        let mock = MockClient::with_script(0, |_, _| Some(Ok("   ".into())));
        let cfg = AnnotationConfig::default();
        let err = annotate_chunk(&["a"], &mock, &cfg).unwrap_err();
        assert!(matches!(err, AnnotationError::EmptyResponse { attempts: 2, node: None }));
        assert_eq!(mock.call_count(), 2);
        let tagged = err.at(NodeId::new(1, 2));
        assert!(tagged.to_string().contains("L1C2"));
    }

    #[test]
    fn reconcile_calls() {
        let mock = MockClient::new(3);
        let cfg = AnnotationConfig::default();
        let one = reconcile(&["Optics".to_string()], &mock, &cfg).unwrap();
        assert_eq!(one.label, "Optics");
        assert_eq!(mock.call_count(), 0);
        let same = vec!["Optics".to_string(); 6];
        assert_eq!(reconcile(&same, &mock, &cfg).unwrap().label, "Optics");
        let distinct: Vec<String> = (0..6).map(|i| format!("Field {i}")).collect();
        reconcile(&distinct, &mock, &cfg).unwrap();
        assert_eq!(mock.calls_for(Purpose::Reconcile), 2);
        let prompt = mock.requests()[1].prompt();
        assert!(distinct.iter().all(|l| prompt.contains(l.as_str())));
    }

    #[test]
    fn transcription() {
        let taxonomy = vec!["Humanities".to_string(), "Natural Sciences".to_string()];
        let cfg = AnnotationConfig::default();
        let mock = MockClient::new(5);
        let labels = vec!["History".to_string(), "Physics".to_string(), "History".to_string()];
        let t = transcribe_labels(&labels, &taxonomy, &mock, &cfg).unwrap();
        assert_eq!(t.map.len(), 2);
        assert!(t.map.values().all(|c| taxonomy.contains(c)));
        assert_eq!(mock.call_count(), 2);

        let paraphrase = MockClient::with_script(0, |_, _| Some(Ok("the humanities".into())));
        let t = transcribe_labels(&labels[..1], &taxonomy, &paraphrase, &cfg).unwrap();
        assert_eq!(t.map["History"], UNMAPPED);
        assert_eq!(paraphrase.call_count(), 2);

        assert!(transcribe_labels(&[], &taxonomy, &mock, &cfg).unwrap().map.is_empty());
        assert!(matches!(
            transcribe_labels(&labels, &[], &mock, &cfg),
            Err(AnnotationError::EmptyTaxonomy)
        ));
    }

    #[test]
    fn ledger_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.tsv");
        let rec = AnnotationRecord {
            node: NodeId::new(2, 5),
            label: "Tabs\tand \\ slashes".into(),
            provenance: Provenance::FallbackRepaired,
            degraded: true,
            raw_responses: Vec::new(),
        };
        fs::write(&path, format!("{}L0C1\tdirect\tpartial", ledger_line(&rec))).unwrap();
        assert_eq!(read_ledger(&path).unwrap(), vec![rec]);
        drop(open_ledger(&path).unwrap());
        assert!(fs::read_to_string(&path).unwrap().ends_with('\n'));
    }
}
