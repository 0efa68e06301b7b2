//! Query samples as read from dataset files.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Evaluation subset a question belongs to. Drives the per-split breakdown in
/// reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    UnseenQuestion,
    UnseenEntity,
    SingleHop,
    TwoHop,
}

/// An image-question pair. The image is only ever an opaque reference plus a
/// precomputed embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    pub question: String,
    pub image_ref: String,
    #[serde(default)]
    pub image_embedding: Option<Vec<f32>>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_doc_id: Option<String>,
    pub dataset: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    /// Image descriptions for text-only annotators and judges.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("sample `{0}`: gold_answers must be non-empty for train/val samples")]
    MissingAnswers(String),
    #[error("sample `{id}`: image embedding has dimension {found}, expected {expected}")]
    EmbeddingDim { id: String, expected: usize, found: usize },
    #[error("sample `{0}`: question is empty")]
    EmptyQuestion(String),
}

impl QuerySample {
    pub fn validate(&self, kb_dim: Option<usize>) -> Result<(), SampleError> {
        if self.question.trim().is_empty() {
            return Err(SampleError::EmptyQuestion(self.id.clone()));
        }
        if matches!(self.split, Split::Train | Split::Val) && self.gold_answers.is_empty() {
            return Err(SampleError::MissingAnswers(self.id.clone()));
        }
        if let (Some(d), Some(v)) = (kb_dim, &self.image_embedding) {
            if v.len() != d {
                return Err(SampleError::EmbeddingDim { id: self.id.clone(), expected: d, found: v.len() });
            }
        }
        Ok(())
    }

    /// First gold answer, used as the supervision target.
    pub fn primary_answer(&self) -> Option<&str> {
        self.gold_answers.first().map(String::as_str)
    }
}
