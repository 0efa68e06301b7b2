//! Exact dense retrieval over knowledge-base documents.
//!
//! Every stored vector is L2-normalized on insertion, so cosine similarity is a
//! plain dot product. Search is a flat scan with a bounded heap; large indexes
//! are scanned in parallel chunks and merged, which keeps the result identical
//! to a full sort by `(score desc, insertion order asc)`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{read_f32_le, sidecar_path, write_atomic, write_f32_le};
use crate::kb::{KbError, KnowledgeBase, Passage};

/// Default number of retrieved documents.
pub const DEFAULT_TOP_K: usize = 5;

const PARALLEL_MIN_ROWS: usize = 32_768;
const CHUNK_ROWS: usize = 8_192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Query image against document titles.
    TextualTitle,
    /// Query image against `title + "\n" + summary`.
    TextualTitleSummary,
    /// Query image against the document image.
    Visual,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::TextualTitle => "textual_title",
            RetrievalMode::TextualTitleSummary => "textual_title_summary",
            RetrievalMode::Visual => "visual",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "textual_title" | "title" | "t" => Ok(RetrievalMode::TextualTitle),
            "textual_title_summary" | "title-summary" | "title_summary" | "t+s" => {
                Ok(RetrievalMode::TextualTitleSummary)
            }
            "visual" => Ok(RetrievalMode::Visual),
            other => Err(IndexError::Format(format!("unknown retrieval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("query has dimension {found}, index has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("visual index requested but no document carries an image embedding")]
    NoVisualEmbeddings,
    #[error("textual retrieval mode requires a text embedder")]
    MissingEmbedder,
    #[error("embedding document `{doc_id}` failed: {source}")]
    Embed { doc_id: String, source: EmbedError },
    #[error("duplicate document id `{0}` in index")]
    DuplicateId(String),
    #[error("zero or non-finite vector for `{0}`")]
    DegenerateVector(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("text has no embeddable tokens")]
    EmptyText,
    #[error("embedding service: {0}")]
    Remote(String),
}

/// Produces text embeddings in the same space as query image embeddings.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Deterministic feature-hashing embedder. Each lowercase alphanumeric token is
/// hashed (FNV-1a) to a signed bucket. Useful offline and in tests; it is not a
/// substitute for a trained encoder.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut v = vec![0f64; self.dim];
        let mut any = false;
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = fnv1a(tok.to_lowercase().as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
            any = true;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !any || norm == 0.0 {
            return Err(EmbedError::EmptyText);
        }
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Normalize to unit length. `None` for zero or non-finite input.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

fn normalize_f64(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|&x| f64::from(x) / norm).collect())
}

/// A candidate during top-k selection. `Ord` puts *worse* candidates first so a
/// max-heap keeps the current worst on top.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    row: usize,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.row.cmp(&other.row))
    }
}

fn push_bounded(heap: &mut BinaryHeap<Scored>, k: usize, c: Scored) {
    if heap.len() < k {
        heap.push(c);
    } else if let Some(worst) = heap.peek() {
        if c < *worst {
            heap.pop();
            heap.push(c);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    mode: RetrievalMode,
    dim: usize,
    ids: Vec<String>,
    /// Row-major, `ids.len() * dim`, every row unit length.
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    mode: RetrievalMode,
    dim: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntryLine {
    doc_id: String,
}

impl DenseIndex {
    /// Build from raw `(doc_id, vector)` pairs; vectors are normalized here.
    pub fn from_entries<I>(mode: RetrievalMode, dim: usize, entries: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in entries {
            if v.len() != dim {
                return Err(IndexError::DimensionMismatch { expected: dim, found: v.len() });
            }
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id));
            }
            let v = normalize(&v).ok_or_else(|| IndexError::DegenerateVector(id.clone()))?;
            data.extend_from_slice(&v);
            ids.push(id);
        }
        Ok(Self { mode, dim, ids, data })
    }

    pub fn mode(&self) -> RetrievalMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.ids.iter().position(|id| id == doc_id)
    }

    fn dot(&self, row: usize, q: &[f64]) -> f64 {
        self.vector(row).iter().zip(q).map(|(&a, &b)| f64::from(a) * b).sum()
    }

    fn prepare_query(&self, query: &[f32]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        normalize_f64(query).ok_or_else(|| IndexError::DegenerateVector("query".into()))
    }

    fn top_rows(&self, q: &[f64], k: usize, rows: std::ops::Range<usize>) -> BinaryHeap<Scored> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for row in rows {
            push_bounded(&mut heap, k, Scored { score: self.dot(row, q), row });
        }
        heap
    }

    /// The `k` most similar documents (all of them if `k` exceeds the index
    /// size), ties broken by insertion order.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let q = self.prepare_query(query)?;
        let n = self.len();
        let k = k.min(n);
        let heap = if n >= PARALLEL_MIN_ROWS {
            let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
            starts
                .par_iter()
                .map(|&s| self.top_rows(&q, k, s..(s + CHUNK_ROWS).min(n)))
                .reduce(BinaryHeap::new, |mut a, b| {
                    for c in b {
                        push_bounded(&mut a, k, c);
                    }
                    a
                })
        } else {
            self.top_rows(&q, k, 0..n)
        };
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RetrievalHit { doc_id: self.ids[c.row].clone(), score: c.score, rank: i + 1 })
            .collect())
    }

    /// 1-based rank the entry at `row` would get for this query.
    fn rank_of(&self, q: &[f64], row: usize) -> usize {
        let target = Scored { score: self.dot(row, q), row };
        1 + (0..self.len())
            .filter(|&r| r != row && Scored { score: self.dot(r, q), row: r } < target)
            .count()
    }

    /// Write the header + id lines to `path` and the vectors to the `.vec` sidecar.
    pub fn write(&self, path: &Path) -> Result<(), IndexError> {
        let mut out = serde_json::to_vec(&IndexHeader { mode: self.mode, dim: self.dim, count: self.len() })
            .expect("header serializes");
        out.push(b'\n');
        for id in &self.ids {
            serde_json::to_writer(&mut out, &IndexEntryLine { doc_id: id.clone() }).expect("entry serializes");
            out.push(b'\n');
        }
        let vec_path = sidecar_path(path);
        write_atomic(&vec_path, &write_f32_le(self.data.iter().copied()))
            .map_err(|source| IndexError::Io { path: vec_path, source })?;
        write_atomic(path, &out).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self, IndexError> {
        let text = fs::read_to_string(path).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: IndexHeader = lines
            .next()
            .ok_or_else(|| IndexError::Format("missing header".into()))
            .and_then(|l| serde_json::from_str(l).map_err(|e| IndexError::Format(format!("header: {e}"))))?;
        let mut ids = Vec::with_capacity(header.count);
        for (i, l) in lines.enumerate() {
            let e: IndexEntryLine =
                serde_json::from_str(l).map_err(|e| IndexError::Format(format!("entry {}: {e}", i + 1)))?;
            ids.push(e.doc_id);
        }
        if ids.len() != header.count {
            return Err(IndexError::Format(format!("header count {} but {} entries", header.count, ids.len())));
        }
        let vec_path = sidecar_path(path);
        let bytes = fs::read(&vec_path).map_err(|source| IndexError::Io { path: vec_path.clone(), source })?;
        let data = read_f32_le(&bytes).ok_or_else(|| IndexError::Format("sidecar not a multiple of 4 bytes".into()))?;
        if data.len() != header.count * header.dim {
            return Err(IndexError::Format(format!(
                "sidecar holds {} floats, expected {}",
                data.len(),
                header.count * header.dim
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(IndexError::DuplicateId(dup.clone()));
        }
        Ok(Self { mode: header.mode, dim: header.dim, ids, data })
    }
}

/// Build a document index for `mode`. Visual mode uses the stored image
/// embeddings and skips documents without one; textual modes embed the title
/// (or title, newline, summary) with `embedder`.
pub fn build_index(
    kb: &KnowledgeBase,
    mode: RetrievalMode,
    embedder: Option<&dyn TextEmbedder>,
) -> Result<DenseIndex, IndexError> {
    match mode {
        RetrievalMode::Visual => {
            let entries: Vec<_> = kb
                .documents()
                .iter()
                .filter_map(|d| d.image_embedding.as_ref().map(|v| (d.id.clone(), v.clone())))
                .collect();
            if entries.is_empty() {
                return Err(IndexError::NoVisualEmbeddings);
            }
            DenseIndex::from_entries(mode, kb.embedding_dim(), entries)
        }
        RetrievalMode::TextualTitle | RetrievalMode::TextualTitleSummary => {
            let embedder = embedder.ok_or(IndexError::MissingEmbedder)?;
            let entries = kb
                .documents()
                .par_iter()
                .map(|d| {
                    let text = match mode {
                        RetrievalMode::TextualTitle => d.title.clone(),
                        _ => format!("{}\n{}", d.title, d.summary),
                    };
                    embedder
                        .embed(&text)
                        .map(|v| (d.id.clone(), v))
                        .map_err(|source| IndexError::Embed { doc_id: d.id.clone(), source })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(kb.embedding_dim());
            DenseIndex::from_entries(mode, dim, entries)
        }
    }
}

/// The union of the passages of the first `min(k, hits.len())` hits, in
/// (document rank, section order).
pub fn candidate_passages(kb: &KnowledgeBase, hits: &[RetrievalHit], k: usize) -> Result<Vec<Passage>, KbError> {
    let mut out = Vec::new();
    for hit in hits.iter().take(k) {
        out.extend(kb.passages_of(&hit.doc_id)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub recall: f64,
    pub num_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
    /// Queries excluded from the counts, with the reason.
    pub errors: Vec<String>,
}

/// Recall@k for each `k`: the fraction of queries whose gold document ranks
/// within the top `k`. Queries with an unknown gold id or a bad vector are
/// excluded and reported in `errors`.
pub fn recall_at_k(
    index: &DenseIndex,
    queries: &[(Vec<f32>, String)],
    ks: &[usize],
) -> Result<RecallReport, IndexError> {
    if ks.contains(&0) {
        return Err(IndexError::ZeroK);
    }
    let ranks: Vec<Result<usize, String>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, (v, gold))| {
            let row = index.position(gold).ok_or_else(|| format!("query {i}: unknown gold document `{gold}`"))?;
            let q = index.prepare_query(v).map_err(|e| format!("query {i}: {e}"))?;
            Ok(index.rank_of(&q, row))
        })
        .collect();
    let mut errors = Vec::new();
    let mut valid = Vec::new();
    for r in ranks {
        match r {
            Ok(rank) => valid.push(rank),
            Err(e) => errors.push(e),
        }
    }
    let n = valid.len();
    let rows = ks
        .iter()
        .map(|&k| RecallRow {
            k,
            recall: if n == 0 { 0.0 } else { valid.iter().filter(|&&r| r <= k).count() as f64 / n as f64 },
            num_queries: n,
        })
        .collect();
    Ok(RecallReport { rows, errors })
}
