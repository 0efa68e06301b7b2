//! Question–passage text similarity, used for shortlisting during annotation
//! and for the external-scorer ablation.

use std::collections::HashSet;

use crate::index::{EmbedError, TextEmbedder};
use crate::text::normalized_tokens;

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub trait TextSimilarity: Send + Sync {
    fn score(&self, question: &str, passage: &str) -> Result<f64, SimilarityError>;
}

/// Fraction of distinct normalized question tokens that occur in the passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl TextSimilarity for LexicalOverlapScorer {
    fn score(&self, question: &str, passage: &str) -> Result<f64, SimilarityError> {
        let q: HashSet<String> = normalized_tokens(question).into_iter().collect();
        if q.is_empty() {
            return Ok(0.0);
        }
        let p: HashSet<String> = normalized_tokens(passage).into_iter().collect();
        Ok(q.intersection(&p).count() as f64 / q.len() as f64)
    }
}

/// Cosine similarity between embeddings from a text embedder (a dense
/// retriever such as a Contriever server).
pub struct EmbeddingScorer<E> {
    pub embedder: E,
}

impl<E: TextEmbedder> TextSimilarity for EmbeddingScorer<E> {
    fn score(&self, question: &str, passage: &str) -> Result<f64, SimilarityError> {
        let a = self.embedder.embed(question)?;
        let b = self.embedder.embed(passage)?;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
    }
}

/// Indices of `passages` ordered by descending score, ties by position.
pub fn rank_by_similarity(
    scorer: &dyn TextSimilarity,
    question: &str,
    passages: &[&str],
) -> Result<Vec<(usize, f64)>, SimilarityError> {
    let mut scored = passages
        .iter()
        .enumerate()
        .map(|(i, p)| scorer.score(question, p).map(|s| (i, s)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}
