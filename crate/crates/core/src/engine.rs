//! The reflective generation protocol: decide whether to retrieve, judge each
//! candidate passage, then answer from the passages judged relevant.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{constrained_generate, BackendError, GenerativeBackend, ReflectiveToken, Vocabulary};
use crate::index::{candidate_passages, DenseIndex, IndexError, RetrievalHit, DEFAULT_TOP_K};
use crate::kb::{KbError, KnowledgeBase, Passage};
use crate::prompt::{build_prompt, PromptError, PromptStage};
use crate::rng::rng_for;
use crate::sample::QuerySample;
use crate::similarity::{rank_by_similarity, SimilarityError, TextSimilarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Rerank {
    None,
    /// Order candidates by the model's own relevance score, keep the top `k_p`.
    BuiltIn { k_p: usize },
    /// Reorder candidates with an external service, keep the top `k_p`, then
    /// judge as usual.
    External { k_p: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceDecision {
    #[default]
    None,
    AlwaysRet,
    AlwaysNoRet,
}

/// How the answer context is chosen from the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PassageSelection {
    /// Per-passage `<REL>`/`<NOREL>` judgments.
    #[default]
    Reflective,
    /// No judgments; the `top_n` candidates by text similarity.
    ExternalScorer { top_n: usize },
    /// No judgments; `per_doc` seeded-random passages from each retrieved document.
    RandomPerDoc { per_doc: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerFailure {
    #[default]
    Fail,
    FallThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k_docs: usize,
    pub rerank: Rerank,
    pub max_relevant: Option<usize>,
    pub force_decision: ForceDecision,
    pub passage_selection: PassageSelection,
    pub reranker_failure: RerankerFailure,
    pub seed: u64,
    /// Record wall-clock phase durations in traces. Off by default so traces
    /// are reproducible byte for byte.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k_docs: DEFAULT_TOP_K,
            rerank: Rerank::None,
            max_relevant: None,
            force_decision: ForceDecision::None,
            passage_selection: PassageSelection::Reflective,
            reranker_failure: RerankerFailure::Fail,
            seed: 0,
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.top_k_docs == 0 {
            return bad("top_k_docs must be at least 1");
        }
        if let Rerank::BuiltIn { k_p: 0 } | Rerank::External { k_p: 0 } = self.rerank {
            return bad("k_p must be at least 1");
        }
        if self.max_relevant == Some(0) {
            return bad("max_relevant must be at least 1 when set");
        }
        match self.passage_selection {
            PassageSelection::ExternalScorer { top_n: 0 } => bad("external scorer top_n must be at least 1"),
            PassageSelection::RandomPerDoc { per_doc: 0 } => bad("random per_doc must be at least 1"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDecision {
    /// Effective branch after any forced override.
    pub token: ReflectiveToken,
    /// Token the model emitted.
    pub model_token: ReflectiveToken,
    pub logp_ret: f64,
    pub logp_noret: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub passage: Passage,
    pub token: ReflectiveToken,
    pub logp_rel: f64,
    pub logp_norel: f64,
    pub score: f64,
}

impl RelevanceJudgment {
    /// `<REL>` iff the score is strictly positive.
    pub fn new(passage: Passage, logp_rel: f64, logp_norel: f64) -> Self {
        let score = logp_rel - logp_norel;
        let token = if score > 0.0 { ReflectiveToken::Rel } else { ReflectiveToken::NoRel };
        Self { passage, token, logp_rel, logp_norel, score }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedJudgment {
    pub passage: Passage,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub decision_ms: f64,
    pub retrieval_ms: f64,
    pub judgment_ms: f64,
    pub answer_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub sample_id: String,
    pub decision: RetrievalDecision,
    pub hits: Vec<RetrievalHit>,
    pub candidates: Vec<Passage>,
    pub judgments: Vec<RelevanceJudgment>,
    pub selected: Vec<Passage>,
    pub answer: String,
    /// Nothing was judged relevant; the best-scoring passage was used instead.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_judgments: Vec<FailedJudgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("sample `{0}` has no image embedding to query the index with")]
    MissingQueryEmbedding(String),
    #[error("sample `{0}` has no gold document")]
    MissingGold(String),
    #[error("sample `{0}`: retrieval produced no candidate passages")]
    NoCandidates(String),
    #[error("sample `{sample_id}`: all {count} judgments failed; first error: {first}")]
    AllJudgmentsFailed { sample_id: String, count: usize, first: String },
    #[error("reranker: {0}")]
    Rerank(#[from] RerankError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RerankError {
    #[error("reranker changed passage multiset")]
    ChangedMultiset,
    #[error("reranker service: {0}")]
    Service(String),
}

pub trait Reranker: Send + Sync {
    /// Return `passages` in a new order.
    fn rerank(&self, question: &str, passages: &[Passage]) -> Result<Vec<Passage>, RerankError>;
}

/// Reranks by a text-similarity provider, ties by original order.
pub struct SimilarityReranker<S>(pub S);

impl<S: TextSimilarity> Reranker for SimilarityReranker<S> {
    fn rerank(&self, question: &str, passages: &[Passage]) -> Result<Vec<Passage>, RerankError> {
        let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
        let order = rank_by_similarity(&self.0, question, &texts).map_err(|e| RerankError::Service(e.to_string()))?;
        Ok(order.into_iter().map(|(i, _)| passages[i].clone()).collect())
    }
}

/// Apply `reranker` and check that it only reordered.
pub fn apply_external_reranker(
    reranker: &dyn Reranker,
    question: &str,
    candidates: &[Passage],
) -> Result<Vec<Passage>, RerankError> {
    let out = reranker.rerank(question, candidates)?;
    let mut a = candidates.to_vec();
    let mut b = out.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(RerankError::ChangedMultiset);
    }
    Ok(out)
}

/// Passages ordered by judgment score, descending, ties by input order; at
/// most `k_p` returned regardless of token.
pub fn rank_by_relevance(judgments: &[RelevanceJudgment], k_p: usize) -> Vec<Passage> {
    let mut order: Vec<&RelevanceJudgment> = judgments.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    order.into_iter().take(k_p).map(|j| j.passage.clone()).collect()
}

/// Decision and judgments for fixed passages, without answering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub decision: RetrievalDecision,
    pub judgments: Vec<RelevanceJudgment>,
}

/// Runs the protocol against one backend and (optionally) a KB and index.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    backend: &'a dyn GenerativeBackend,
    kb: Option<&'a KnowledgeBase>,
    index: Option<&'a DenseIndex>,
    reranker: Option<&'a dyn Reranker>,
    scorer: Option<&'a dyn TextSimilarity>,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn GenerativeBackend) -> Self {
        Self { backend, kb: None, index: None, reranker: None, scorer: None }
    }

    pub fn with_knowledge(mut self, kb: &'a KnowledgeBase, index: &'a DenseIndex) -> Self {
        self.kb = Some(kb);
        self.index = Some(index);
        self
    }

    /// KB only; enough for oracle runs.
    pub fn with_kb(mut self, kb: &'a KnowledgeBase) -> Self {
        self.kb = Some(kb);
        self
    }

    pub fn with_reranker(mut self, reranker: &'a dyn Reranker) -> Self {
        self.reranker = Some(reranker);
        self
    }

    pub fn with_scorer(mut self, scorer: &'a dyn TextSimilarity) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn backend(&self) -> &'a dyn GenerativeBackend {
        self.backend
    }

    pub fn kb(&self) -> Option<&'a KnowledgeBase> {
        self.kb
    }

    pub fn index(&self) -> Option<&'a DenseIndex> {
        self.index
    }

    /// Check that everything `config` needs is attached.
    pub fn check(&self, config: &PipelineConfig) -> Result<(), EngineError> {
        config.validate()?;
        let may_retrieve = config.force_decision != ForceDecision::AlwaysNoRet;
        if may_retrieve && (self.kb.is_none() || self.index.is_none()) {
            return Err(EngineError::Config("retrieval may occur but no knowledge base/index is loaded".into()));
        }
        if matches!(config.rerank, Rerank::External { .. }) && self.reranker.is_none() {
            return Err(EngineError::Config("external re-ranking requires a reranker".into()));
        }
        if matches!(config.passage_selection, PassageSelection::ExternalScorer { .. }) && self.scorer.is_none() {
            return Err(EngineError::Config("external-scorer selection requires a text-similarity provider".into()));
        }
        Ok(())
    }

    pub fn decide_retrieval(&self, sample: &QuerySample, force: ForceDecision) -> Result<RetrievalDecision, EngineError> {
        let prompt = build_prompt(PromptStage::Decision, sample, &[])?;
        let vocab = Vocabulary::of(&[ReflectiveToken::Ret, ReflectiveToken::NoRet]);
        let r = constrained_generate(self.backend, &prompt, &vocab, Some(1))?;
        let logp = |t: ReflectiveToken| {
            r.first_step_logprob(t.as_str())
                .ok_or_else(|| BackendError::ProtocolViolation(format!("decision step did not score {t}")))
        };
        let logp_ret = logp(ReflectiveToken::Ret)?;
        let logp_noret = logp(ReflectiveToken::NoRet)?;
        let model_token: ReflectiveToken = r.tokens[0].parse()?;
        let token = match force {
            ForceDecision::None => model_token,
            ForceDecision::AlwaysRet => ReflectiveToken::Ret,
            ForceDecision::AlwaysNoRet => ReflectiveToken::NoRet,
        };
        // Forced means the override changed the branch.
        Ok(RetrievalDecision { token, model_token, logp_ret, logp_noret, forced: token != model_token })
    }

    pub fn judge_passage(&self, sample: &QuerySample, passage: &Passage) -> Result<RelevanceJudgment, EngineError> {
        let prompt = build_prompt(PromptStage::Judgment, sample, std::slice::from_ref(passage))?;
        let vocab = Vocabulary::of(&[ReflectiveToken::Rel, ReflectiveToken::NoRel]);
        let r = constrained_generate(self.backend, &prompt, &vocab, Some(1))?;
        let logp = |t: ReflectiveToken| {
            r.first_step_logprob(t.as_str())
                .ok_or_else(|| BackendError::ProtocolViolation(format!("judgment step did not score {t}")))
        };
        Ok(RelevanceJudgment::new(passage.clone(), logp(ReflectiveToken::Rel)?, logp(ReflectiveToken::NoRel)?))
    }

    /// Judge each passage; failures are collected rather than aborting.
    fn judge_all(
        &self,
        sample: &QuerySample,
        passages: &[Passage],
    ) -> Result<(Vec<RelevanceJudgment>, Vec<FailedJudgment>), EngineError> {
        let mut ok = Vec::with_capacity(passages.len());
        let mut failed = Vec::new();
        for p in passages {
            match self.judge_passage(sample, p) {
                Ok(j) => ok.push(j),
                Err(e) => {
                    log::warn!("sample {}: judging {}#{} failed: {e}", sample.id, p.doc_id, p.section_index);
                    failed.push(FailedJudgment { passage: p.clone(), error: e.to_string() });
                }
            }
        }
        if ok.is_empty() && !failed.is_empty() {
            return Err(EngineError::AllJudgmentsFailed {
                sample_id: sample.id.clone(),
                count: failed.len(),
                first: failed[0].error.clone(),
            });
        }
        Ok((ok, failed))
    }

    fn answer(&self, sample: &QuerySample, selected: &[Passage]) -> Result<String, EngineError> {
        let prompt = if selected.is_empty() {
            build_prompt(PromptStage::AnswerDirect, sample, &[])?
        } else {
            build_prompt(PromptStage::AnswerWithPassages, sample, selected)?
        };
        Ok(constrained_generate(self.backend, &prompt, &Vocabulary::Base, None)?.text())
    }

    /// The full protocol for one sample.
    pub fn run_pipeline(&self, sample: &QuerySample, config: &PipelineConfig) -> Result<PipelineTrace, EngineError> {
        config.validate()?;
        let mut timings = PhaseTimings::default();
        let t = Instant::now();
        let decision = self.decide_retrieval(sample, config.force_decision)?;
        timings.decision_ms = ms(t);
        if decision.token == ReflectiveToken::NoRet {
            let t = Instant::now();
            let answer = self.answer(sample, &[])?;
            timings.answer_ms = ms(t);
            return Ok(PipelineTrace {
                sample_id: sample.id.clone(),
                decision,
                hits: vec![],
                candidates: vec![],
                judgments: vec![],
                selected: vec![],
                answer,
                fallback: false,
                failed_judgments: vec![],
                timings: config.record_timings.then_some(timings),
            });
        }
        let (kb, index) = match (self.kb, self.index) {
            (Some(kb), Some(index)) => (kb, index),
            _ => return Err(EngineError::Config("retrieval chosen but no knowledge base/index is loaded".into())),
        };
        let t = Instant::now();
        let query = sample.image_embedding.as_deref().ok_or_else(|| EngineError::MissingQueryEmbedding(sample.id.clone()))?;
        let hits = index.search(query, config.top_k_docs)?;
        let candidates = candidate_passages(kb, &hits, config.top_k_docs)?;
        timings.retrieval_ms = ms(t);
        self.finish_retrieval(sample, config, decision, hits, candidates, timings)
    }

    /// Oracle-entity mode: the candidates are every passage of the gold
    /// document and no search happens. Retrieval is forced (the decision step
    /// still runs and is recorded).
    pub fn run_oracle(
        &self,
        sample: &QuerySample,
        gold_doc_id: &str,
        config: &PipelineConfig,
    ) -> Result<PipelineTrace, EngineError> {
        config.validate()?;
        let kb = self.kb.ok_or_else(|| EngineError::Config("oracle mode needs a knowledge base".into()))?;
        let candidates = kb.passages_of(gold_doc_id)?;
        let t = Instant::now();
        let decision = self.decide_retrieval(sample, ForceDecision::AlwaysRet)?;
        let timings = PhaseTimings { decision_ms: ms(t), ..Default::default() };
        self.finish_retrieval(sample, config, decision, vec![], candidates, timings)
    }

    fn finish_retrieval(
        &self,
        sample: &QuerySample,
        config: &PipelineConfig,
        decision: RetrievalDecision,
        hits: Vec<RetrievalHit>,
        mut candidates: Vec<Passage>,
        mut timings: PhaseTimings,
    ) -> Result<PipelineTrace, EngineError> {
        if candidates.is_empty() {
            return Err(EngineError::NoCandidates(sample.id.clone()));
        }
        if let Rerank::External { k_p } = config.rerank {
            let reranker = self.reranker.ok_or_else(|| EngineError::Config("external re-ranking requires a reranker".into()))?;
            match apply_external_reranker(reranker, &sample.question, &candidates) {
                Ok(order) => candidates = order,
                Err(e @ RerankError::Service(_)) if config.reranker_failure == RerankerFailure::FallThrough => {
                    log::warn!("sample {}: {e}; keeping retrieval order", sample.id);
                }
                Err(e) => return Err(e.into()),
            }
            candidates.truncate(k_p);
        }

        let t = Instant::now();
        let mut judgments = vec![];
        let mut failed_judgments = vec![];
        let mut fallback = false;
        let selected = match config.passage_selection {
            PassageSelection::Reflective => {
                (judgments, failed_judgments) = self.judge_all(sample, &candidates)?;
                let (sel, fb) = select_relevant(&judgments, config);
                fallback = fb;
                sel
            }
            PassageSelection::ExternalScorer { top_n } => {
                let scorer =
                    self.scorer.ok_or_else(|| EngineError::Config("external-scorer selection requires a scorer".into()))?;
                let texts: Vec<&str> = candidates.iter().map(|p| p.text.as_str()).collect();
                rank_by_similarity(scorer, &sample.question, &texts)?
                    .into_iter()
                    .take(top_n)
                    .map(|(i, _)| candidates[i].clone())
                    .collect()
            }
            PassageSelection::RandomPerDoc { per_doc } => random_per_doc(&candidates, per_doc, config.seed, &sample.id),
        };
        timings.judgment_ms = ms(t);

        let t = Instant::now();
        let answer = self.answer(sample, &selected)?;
        timings.answer_ms = ms(t);
        Ok(PipelineTrace {
            sample_id: sample.id.clone(),
            decision,
            hits,
            candidates,
            judgments,
            selected,
            answer,
            fallback,
            failed_judgments,
            timings: config.record_timings.then_some(timings),
        })
    }

    /// Decision plus judgments on the given passages; nothing is answered.
    pub fn probe(&self, sample: &QuerySample, passages: &[Passage]) -> Result<Probe, EngineError> {
        let decision = self.decide_retrieval(sample, ForceDecision::None)?;
        let judgments = passages.iter().map(|p| self.judge_passage(sample, p)).collect::<Result<_, _>>()?;
        Ok(Probe { decision, judgments })
    }

    /// Run every sample, in parallel, preserving input order.
    pub fn run_batch(
        &self,
        samples: &[QuerySample],
        config: &PipelineConfig,
        oracle: bool,
    ) -> Vec<Result<PipelineTrace, EngineError>> {
        samples
            .par_iter()
            .map(|s| {
                if oracle {
                    let gold = s.gold_doc_id.as_deref().ok_or_else(|| EngineError::MissingGold(s.id.clone()))?;
                    self.run_oracle(s, gold, config)
                } else {
                    self.run_pipeline(s, config)
                }
            })
            .collect()
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// S for reflective selection, plus whether the fallback fired.
fn select_relevant(judgments: &[RelevanceJudgment], config: &PipelineConfig) -> (Vec<Passage>, bool) {
    if let Rerank::BuiltIn { k_p } = config.rerank {
        return (rank_by_relevance(judgments, k_p), false);
    }
    let mut rel: Vec<usize> = (0..judgments.len()).filter(|&i| judgments[i].token == ReflectiveToken::Rel).collect();
    if rel.is_empty() {
        return (rank_by_relevance(judgments, 1), true);
    }
    if let Some(cap) = config.max_relevant {
        if rel.len() > cap {
            let mut by_score = rel.clone();
            by_score.sort_by(|&a, &b| judgments[b].score.total_cmp(&judgments[a].score));
            by_score.truncate(cap);
            rel.retain(|i| by_score.contains(i));
        }
    }
    (rel.into_iter().map(|i| judgments[i].passage.clone()).collect(), false)
}

/// `per_doc` random passages from each document, documents in candidate
/// order and passages in section order within each.
fn random_per_doc(candidates: &[Passage], per_doc: usize, seed: u64, sample_id: &str) -> Vec<Passage> {
    let mut rng = rng_for(seed, "random_passages", sample_id);
    let mut out = Vec::new();
    let mut start = 0;
    while start < candidates.len() {
        let doc = &candidates[start].doc_id;
        let end = start + candidates[start..].iter().take_while(|p| &p.doc_id == doc).count();
        let group = &candidates[start..end];
        let mut picked: Vec<&Passage> = group.choose_multiple(&mut rng, per_doc.min(group.len())).collect();
        picked.sort_by_key(|p| p.section_index);
        out.extend(picked.into_iter().cloned());
        start = end;
    }
    out
}
