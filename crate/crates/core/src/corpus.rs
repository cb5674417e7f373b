//! Flat-file corpus store: a binary embedding matrix plus an optional
//! tab-separated metadata sidecar.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! b"SEMT" | u32 version = 1 | u64 n | u64 d | n*d f32, row-major
//! ```
//!
//! The sidecar holds exactly `n` lines of
//! `external_id<TAB>label<TAB>text`, each field backslash-escaped. An empty
//! label or text field means "absent".

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SEMT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a SEMT embedding file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("payload length mismatch: header declares {expected} floats, found {found}")]
    PayloadLengthMismatch { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("matrix has {rows} rows but corpus has {docs} documents")]
    RowCountMismatch { rows: usize, docs: usize },
    #[error("row {row} has {len} values, expected {expected}")]
    RaggedRow { row: usize, len: usize, expected: usize },
    #[error("duplicate external id {0:?}")]
    DuplicateExternalId(String),
    #[error("metadata has {found} lines, expected {expected}")]
    MetadataCount { expected: usize, found: usize },
    #[error("malformed metadata line {line}: {reason}")]
    MalformedMetadata { line: usize, reason: String },
    #[error("label file has {found} entries, corpus has {expected} documents")]
    LabelCountMismatch { expected: usize, found: usize },
    #[error("unknown external id {0:?} in label file")]
    UnknownExternalId(String),
    #[error("document {0:?} has no label in the keyed label file")]
    MissingLabel(String),
    #[error("embedding service error: {0}")]
    Fetch(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One corpus record. `id` is the row of the embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub external_id: String,
    pub text: Option<String>,
    pub label: Option<String>,
}

/// Dense row-major matrix of finite `f32` embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        let expected = (n as u64) * (d as u64);
        if values.len() as u64 != expected {
            return Err(CorpusError::PayloadLengthMismatch {
                expected,
                found: values.len() as u64,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite {
                row: pos / d.max(1),
                col: pos % d.max(1),
            });
        }
        Ok(Self { n, d, values })
    }

    /// Builds a matrix from `f64` rows, narrowing to `f32` storage.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * d);
        for (row, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(CorpusError::RaggedRow {
                    row,
                    len: r.len(),
                    expected: d,
                });
            }
            values.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), d, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Row `i` widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Whole matrix widened to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Documents plus their embedding matrix. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    matrix: EmbeddingMatrix,
}

impl Corpus {
    /// Assembles a corpus. Empty strings for text or label are normalized to
    /// `None`.
    pub fn new(mut documents: Vec<Document>, matrix: EmbeddingMatrix) -> Result<Self> {
        if documents.len() != matrix.n() {
            return Err(CorpusError::RowCountMismatch {
                rows: matrix.n(),
                docs: documents.len(),
            });
        }
        let mut seen = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter_mut().enumerate() {
            doc.id = i;
            if doc.text.as_deref() == Some("") {
                doc.text = None;
            }
            if doc.label.as_deref() == Some("") {
                doc.label = None;
            }
            if seen.insert(doc.external_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateExternalId(doc.external_id.clone()));
            }
        }
        Ok(Self { documents, matrix })
    }

    /// Corpus with generated external ids (`"0"`, `"1"`, ...) and no metadata.
    pub fn from_matrix(matrix: EmbeddingMatrix) -> Self {
        let documents = (0..matrix.n())
            .map(|id| Document {
                id,
                external_id: id.to_string(),
                text: None,
                label: None,
            })
            .collect();
        Self { documents, matrix }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn has_labels(&self) -> bool {
        !self.documents.is_empty() && self.documents.iter().all(|d| d.label.is_some())
    }

    pub fn has_texts(&self) -> bool {
        self.documents.iter().any(|d| d.text.is_some())
    }

    /// Label vector in id order, or `None` unless every document is labeled.
    pub fn labels(&self) -> Option<Vec<String>> {
        self.documents.iter().map(|d| d.label.clone()).collect()
    }

    /// Sorted set of distinct labels.
    pub fn label_vocabulary(&self) -> Vec<String> {
        self.documents
            .iter()
            .filter_map(|d| d.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Returns a copy with the given labels, in id order.
    pub fn with_labels(&self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(CorpusError::LabelCountMismatch {
                expected: self.len(),
                found: labels.len(),
            });
        }
        let documents = self
            .documents
            .iter()
            .zip(labels)
            .map(|(d, label)| Document {
                label: Some(label),
                ..d.clone()
            })
            .collect();
        Corpus::new(documents, self.matrix.clone())
    }

    /// Returns a copy with the given texts, in id order.
    pub fn with_texts(&self, texts: Vec<String>) -> Result<Self> {
        if texts.len() != self.len() {
            return Err(CorpusError::MetadataCount {
                expected: self.len(),
                found: texts.len(),
            });
        }
        let documents = self
            .documents
            .iter()
            .zip(texts)
            .map(|(d, text)| Document {
                text: Some(text),
                ..d.clone()
            })
            .collect();
        Corpus::new(documents, self.matrix.clone())
    }
}

/// Path of the metadata sidecar written next to an embedding file.
pub fn sidecar_path(embeddings_path: &Path) -> PathBuf {
    let mut s = embeddings_path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_matrix(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(matrix.n as u64).to_le_bytes());
    header.extend_from_slice(&(matrix.d as u64).to_le_bytes());
    w.write_all(&header).map_err(|e| CorpusError::io(path, e))?;
    for v in &matrix.values {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| CorpusError::io(path, e))?;
    decode_matrix(&bytes)
}

/// Decodes the binary embedding layout from memory.
pub fn decode_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CorpusError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CorpusError::TruncatedHeader);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CorpusError::UnsupportedVersion(version));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let expected = n.checked_mul(d).ok_or(CorpusError::PayloadLengthMismatch {
        expected: u64::MAX,
        found: payload.len() as u64 / 4,
    })?;
    if !payload.len().is_multiple_of(4) || payload.len() as u64 / 4 != expected {
        return Err(CorpusError::PayloadLengthMismatch {
            expected,
            found: payload.len() as u64 / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(n as usize, d as usize, values)
}

pub(crate) fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape_field(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(CorpusError::MalformedMetadata {
                    line,
                    reason: format!("invalid escape sequence \\{}", other.map_or(String::new(), String::from)),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_metadata(documents: &[Document], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in documents {
        writeln!(
            w,
            "{}\t{}\t{}",
            escape_field(&doc.external_id),
            escape_field(doc.label.as_deref().unwrap_or("")),
            escape_field(doc.text.as_deref().unwrap_or(""))
        )
        .map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::MalformedMetadata {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = unescape_field(fields[1], i + 1)?;
        let text = unescape_field(fields[2], i + 1)?;
        documents.push(Document {
            id: i,
            external_id: unescape_field(fields[0], i + 1)?,
            label: (!label.is_empty()).then_some(label),
            text: (!text.is_empty()).then_some(text),
        });
    }
    Ok(documents)
}

/// Loads an embedding file and, if given, its metadata sidecar.
pub fn load_corpus(embeddings_path: &Path, meta_path: Option<&Path>) -> Result<Corpus> {
    let matrix = read_matrix(embeddings_path)?;
    match meta_path {
        None => Ok(Corpus::from_matrix(matrix)),
        Some(meta) => {
            let documents = read_metadata(meta)?;
            if documents.len() != matrix.n() {
                return Err(CorpusError::MetadataCount {
                    expected: matrix.n(),
                    found: documents.len(),
                });
            }
            Corpus::new(documents, matrix)
        }
    }
}

/// Loads `path` together with `path.meta` when the sidecar exists.
pub fn load_corpus_auto(path: &Path) -> Result<Corpus> {
    let meta = sidecar_path(path);
    load_corpus(path, meta.exists().then_some(meta.as_path()))
}

/// Writes the embedding file to `path` and the metadata sidecar to
/// `path.meta`.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_matrix(&corpus.matrix, path)?;
    write_metadata(&corpus.documents, &sidecar_path(path))
}

/// Attaches labels read from `path`.
///
/// Two layouts are accepted: one label per line in id order, or
/// `external_id<TAB>label` lines in any order covering every document.
/// Returns the labeled corpus and its sorted label vocabulary.
pub fn load_labels(path: &Path, corpus: &Corpus) -> Result<(Corpus, Vec<String>)> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| CorpusError::io(path, e))?;
    let lines: Vec<&str> = lines
        .iter()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .collect();

    let keyed = !lines.is_empty() && lines.iter().all(|l| l.contains('\t'));
    let labels = if keyed {
        let index: HashMap<&str, usize> = corpus
            .documents()
            .iter()
            .map(|d| (d.external_id.as_str(), d.id))
            .collect();
        let mut labels: Vec<Option<String>> = vec![None; corpus.len()];
        for line in &lines {
            let (key, label) = line.split_once('\t').unwrap();
            let id = *index
                .get(key)
                .ok_or_else(|| CorpusError::UnknownExternalId(key.to_string()))?;
            labels[id] = Some(label.to_string());
        }
        labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    CorpusError::MissingLabel(corpus.documents()[i].external_id.clone())
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        if lines.len() != corpus.len() {
            return Err(CorpusError::LabelCountMismatch {
                expected: corpus.len(),
                found: lines.len(),
            });
        }
        lines.iter().map(|l| l.to_string()).collect()
    };
    let labeled = corpus.with_labels(labels)?;
    let vocab = labeled.label_vocabulary();
    Ok((labeled, vocab))
}
