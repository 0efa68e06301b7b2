//! The external knowledge base: documents with sectioned text and an optional
//! precomputed image embedding.
//!
//! On disk a knowledge base is a JSONL file. The first line is a manifest
//! (`{"manifest": true, "embedding_dim": d, "count": n}`) and every following
//! line is one document. Embeddings are either inline float arrays or, when the
//! manifest says `"embeddings": "sidecar"`, rows of a little-endian `f32`
//! `.vec` file next to the JSONL, one row per document in file order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{read_f32_le, sidecar_path, write_atomic, write_f32_le};

/// Allowed deviation of an embedding's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub summary: String,
    pub sections: Vec<Section>,
    #[serde(default)]
    pub image_embedding: Option<Vec<f32>>,
}

/// One section of a document. Passages are views: `text` is always the
/// section body verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub section_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingStorage {
    #[default]
    Inline,
    Sidecar,
}

impl EmbeddingStorage {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingStorage::Inline => "inline",
            EmbeddingStorage::Sidecar => "sidecar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestLine {
    manifest: bool,
    embedding_dim: usize,
    count: usize,
    #[serde(default, skip_serializing_if = "is_inline")]
    embeddings: EmbeddingStorage,
}

fn is_inline(s: &EmbeddingStorage) -> bool {
    *s == EmbeddingStorage::Inline
}

/// Where a knowledge base came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceManifest {
    pub path: PathBuf,
    pub count: usize,
    /// SHA-256 of the JSONL bytes, hex encoded.
    pub checksum: String,
    pub embeddings: EmbeddingStorage,
}

/// Counters gathered while loading. Warnings never abort a load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub documents: usize,
    pub sections: usize,
    pub embedded: usize,
    pub missing_embedding: usize,
    pub empty_summary: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line 1: missing or invalid manifest line")]
    MissingManifest,
    #[error("manifest declares embedding_dim 0")]
    ZeroDim,
    #[error("duplicate document id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("document `{id}` (line {line}): title is empty")]
    EmptyTitle { id: String, line: usize },
    #[error("document `{id}` (line {line}): section {section} has an empty body")]
    EmptySection { id: String, line: usize, section: usize },
    #[error("document `{id}` (line {line}): embedding length {found} does not match embedding_dim {expected}")]
    EmbeddingDim { id: String, line: usize, expected: usize, found: usize },
    #[error("document `{id}` (line {line}): embedding not unit-normalized (norm {norm:.6})")]
    NotNormalized { id: String, line: usize, norm: f64 },
    #[error("manifest declares {declared} documents but {found} were read")]
    CountMismatch { declared: usize, found: usize },
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("knowledge base has no documents")]
    Empty,
    #[error("unknown document id `{0}`")]
    UnknownDocument(String),
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    embedding_dim: usize,
    manifest: SourceManifest,
    stats: LoadStats,
}

impl KnowledgeBase {
    /// Build a knowledge base in memory, applying the same validation as [`load_kb`].
    pub fn from_documents(documents: Vec<Document>, embedding_dim: usize) -> Result<Self, KbError> {
        let count = documents.len();
        let mut kb = KbBuilder::new(embedding_dim)?;
        for (i, doc) in documents.into_iter().enumerate() {
            kb.push(doc, i + 2)?;
        }
        kb.finish(SourceManifest {
            path: PathBuf::new(),
            count,
            checksum: String::new(),
            embeddings: EmbeddingStorage::Inline,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn manifest(&self) -> &SourceManifest {
        &self.manifest
    }

    pub fn stats(&self) -> &LoadStats {
        &self.stats
    }

    /// Documents in file order.
    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// One passage per section, in section order.
    pub fn passages_of(&self, doc_id: &str) -> Result<Vec<Passage>, KbError> {
        let doc = self.get(doc_id).ok_or_else(|| KbError::UnknownDocument(doc_id.to_string()))?;
        Ok(doc
            .sections
            .iter()
            .enumerate()
            .map(|(section_index, s)| Passage {
                doc_id: doc.id.clone(),
                section_index,
                text: s.text.clone(),
            })
            .collect())
    }

    /// Resolve a `(doc_id, section_index)` reference.
    pub fn passage(&self, doc_id: &str, section_index: usize) -> Result<Passage, KbError> {
        let doc = self.get(doc_id).ok_or_else(|| KbError::UnknownDocument(doc_id.to_string()))?;
        let s = doc
            .sections
            .get(section_index)
            .ok_or_else(|| KbError::UnknownDocument(format!("{doc_id}#{section_index}")))?;
        Ok(Passage { doc_id: doc.id.clone(), section_index, text: s.text.clone() })
    }
}

struct KbBuilder {
    dim: usize,
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    stats: LoadStats,
}

impl KbBuilder {
    fn new(dim: usize) -> Result<Self, KbError> {
        if dim == 0 {
            return Err(KbError::ZeroDim);
        }
        Ok(Self { dim, documents: Vec::new(), by_id: HashMap::new(), stats: LoadStats::default() })
    }

    fn push(&mut self, doc: Document, line: usize) -> Result<(), KbError> {
        if self.by_id.contains_key(&doc.id) {
            return Err(KbError::DuplicateId { id: doc.id, line });
        }
        if doc.title.trim().is_empty() {
            return Err(KbError::EmptyTitle { id: doc.id, line });
        }
        if let Some(section) = doc.sections.iter().position(|s| s.text.trim().is_empty()) {
            return Err(KbError::EmptySection { id: doc.id, line, section });
        }
        match &doc.image_embedding {
            Some(v) => {
                if v.len() != self.dim {
                    return Err(KbError::EmbeddingDim {
                        id: doc.id.clone(),
                        line,
                        expected: self.dim,
                        found: v.len(),
                    });
                }
                let norm = l2_norm(v);
                if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(KbError::NotNormalized { id: doc.id.clone(), line, norm });
                }
                self.stats.embedded += 1;
            }
            None => {
                log::warn!("document `{}` has no image embedding; excluded from visual indexing", doc.id);
                self.stats.missing_embedding += 1;
            }
        }
        if doc.summary.is_empty() {
            self.stats.empty_summary += 1;
        }
        self.stats.documents += 1;
        self.stats.sections += doc.sections.len();
        self.by_id.insert(doc.id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    fn finish(self, manifest: SourceManifest) -> Result<KnowledgeBase, KbError> {
        if self.documents.is_empty() {
            return Err(KbError::Empty);
        }
        Ok(KnowledgeBase {
            documents: self.documents,
            by_id: self.by_id,
            embedding_dim: self.dim,
            manifest,
            stats: self.stats,
        })
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Load and validate a knowledge base JSONL file.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    let bytes = fs::read(path).map_err(|source| KbError::Io { path: path.to_path_buf(), source })?;
    let checksum = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8_lossy(&bytes);

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let manifest: ManifestLine = match lines.next() {
        Some((_, l)) => serde_json::from_str(l).map_err(|_| KbError::MissingManifest)?,
        None => return Err(KbError::MissingManifest),
    };
    if !manifest.manifest {
        return Err(KbError::MissingManifest);
    }

    let mut records = Vec::with_capacity(manifest.count);
    for (i, l) in lines {
        let doc: Document =
            serde_json::from_str(l).map_err(|source| KbError::Json { line: i + 1, source })?;
        records.push((doc, i + 1));
    }
    if records.len() != manifest.count {
        return Err(KbError::CountMismatch { declared: manifest.count, found: records.len() });
    }

    if manifest.embeddings == EmbeddingStorage::Sidecar {
        attach_sidecar(path, manifest.embedding_dim, &mut records)?;
    }

    let mut builder = KbBuilder::new(manifest.embedding_dim)?;
    for (doc, line) in records {
        builder.push(doc, line)?;
    }
    builder.finish(SourceManifest {
        path: path.to_path_buf(),
        count: manifest.count,
        checksum,
        embeddings: manifest.embeddings,
    })
}

fn attach_sidecar(path: &Path, dim: usize, records: &mut [(Document, usize)]) -> Result<(), KbError> {
    let vec_path = sidecar_path(path);
    let bytes = fs::read(&vec_path).map_err(|source| KbError::Io { path: vec_path.clone(), source })?;
    let values = read_f32_le(&bytes).ok_or_else(|| KbError::Sidecar {
        path: vec_path.clone(),
        reason: "length is not a multiple of 4 bytes".into(),
    })?;
    let expected = records.len() * dim;
    if values.len() != expected {
        return Err(KbError::Sidecar {
            path: vec_path,
            reason: format!("expected {expected} floats ({} rows x {dim}), found {}", records.len(), values.len()),
        });
    }
    for ((doc, _), row) in records.iter_mut().zip(values.chunks_exact(dim)) {
        doc.image_embedding = Some(row.to_vec());
    }
    Ok(())
}

/// Write a knowledge base back to JSONL. With [`EmbeddingStorage::Sidecar`]
/// every document must carry an embedding.
pub fn write_kb(kb: &KnowledgeBase, path: &Path, storage: EmbeddingStorage) -> Result<(), KbError> {
    let io_err = |source| KbError::Io { path: path.to_path_buf(), source };
    let manifest = ManifestLine {
        manifest: true,
        embedding_dim: kb.embedding_dim,
        count: kb.len(),
        embeddings: storage,
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    let mut rows = Vec::new();
    for doc in &kb.documents {
        if storage == EmbeddingStorage::Sidecar {
            let v = doc.image_embedding.as_ref().ok_or_else(|| KbError::Sidecar {
                path: sidecar_path(path),
                reason: format!("document `{}` has no embedding", doc.id),
            })?;
            rows.extend_from_slice(v);
            let mut stripped = doc.clone();
            stripped.image_embedding = None;
            serde_json::to_writer(&mut out, &stripped).expect("document serializes");
        } else {
            serde_json::to_writer(&mut out, doc).expect("document serializes");
        }
        out.push(b'\n');
    }
    if storage == EmbeddingStorage::Sidecar {
        let vec_path = sidecar_path(path);
        write_atomic(&vec_path, &write_f32_le(rows)).map_err(|source| KbError::Io { path: vec_path, source })?;
    }
    write_atomic(path, &out).map_err(io_err)
}
