//! Training-data construction for the two fine-tuning stages.
//!
//! Stage 1 labels the passages of each sample's own article as relevant or
//! not. Stage 2 mines, per sample, a positive and a hard negative from the
//! gold article (judged by the stage-1 model) and a soft negative from the
//! best-ranked other article, then mixes those with no-retrieval samples.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, IteratorRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{GenerativeBackend, ReflectiveToken, PARAGRAPH_CLOSE, PARAGRAPH_OPEN};
use crate::engine::{Engine, EngineError, RelevanceJudgment};
use crate::index::{DenseIndex, IndexError};
use crate::kb::{KbError, KnowledgeBase, Passage};
use crate::rng::rng_for;
use crate::sample::QuerySample;
use crate::similarity::{rank_by_similarity, SimilarityError, TextSimilarity};
use crate::text::normalize_answer;

/// Largest k tried when looking for a non-gold document.
pub const SOFT_NEGATIVE_MAX_K: usize = 50;
/// Passages kept by the similarity shortlist.
pub const SHORTLIST_SIZE: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("sample `{0}` has no gold document")]
    MissingGold(String),
    #[error("sample `{0}` has no gold answer")]
    MissingAnswer(String),
    #[error("sample `{0}`: gold document has a single passage")]
    SinglePassage(String),
    #[error("sample `{0}` has no image embedding")]
    MissingQueryEmbedding(String),
    #[error("sample `{0}`: no non-gold document within the top {SOFT_NEGATIVE_MAX_K}")]
    NoSoftNegative(String),
    #[error("sample `{sample}`: annotator failed: {message}")]
    Annotator { sample: String, message: String },
    #[error("no {0:?} sequences to balance")]
    EmptyKind(SequenceKind),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AnnotatorJudged,
    /// Set by the at-least-one-of-each guarantee.
    SimilarityForced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPassage {
    pub passage: Passage,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct AnnotateError(pub String);

/// Decides whether a passage answers a sample's question.
pub trait PassageAnnotator: Send + Sync {
    fn is_relevant(&self, sample: &QuerySample, passage: &Passage) -> Result<bool, AnnotateError>;
}

/// Relevant iff some gold answer occurs, normalized and on token boundaries,
/// in the normalized passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicAnnotator;

impl PassageAnnotator for HeuristicAnnotator {
    fn is_relevant(&self, sample: &QuerySample, passage: &Passage) -> Result<bool, AnnotateError> {
        Ok(answer_in_text(&sample.gold_answers, &passage.text))
    }
}

pub fn answer_in_text(answers: &[String], text: &str) -> bool {
    let hay = format!(" {} ", normalize_answer(text));
    answers.iter().map(|a| normalize_answer(a)).filter(|a| !a.is_empty()).any(|a| hay.contains(&format!(" {a} ")))
}

/// The (up to) two passages most similar to `question`, ties by section order.
pub fn shortlist_by_similarity(
    scorer: &dyn TextSimilarity,
    question: &str,
    passages: &[Passage],
) -> Result<Vec<(Passage, f64)>, ForgeError> {
    if passages.is_empty() {
        return Err(ForgeError::Input("shortlist needs at least one passage".into()));
    }
    let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
    Ok(rank_by_similarity(scorer, question, &texts)?
        .into_iter()
        .take(SHORTLIST_SIZE)
        .map(|(i, s)| (passages[i].clone(), s))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Labeled(Vec<LabeledPassage>),
    Dropped(String),
}

/// Label every passage of the sample's article, then force one positive
/// (top of the similarity shortlist) and one negative (least similar) if the
/// annotator produced none. Each annotator call is retried `retries` times.
pub fn annotate_in_article(
    annotator: &dyn PassageAnnotator,
    scorer: &dyn TextSimilarity,
    sample: &QuerySample,
    passages: &[Passage],
    retries: u32,
) -> Result<Annotation, ForgeError> {
    if passages.len() < 2 {
        return Ok(Annotation::Dropped(format!("{} passage(s); need at least 2", passages.len())));
    }
    let mut labeled = Vec::with_capacity(passages.len());
    for p in passages {
        let mut attempt = 0;
        let relevant = loop {
            match annotator.is_relevant(sample, p) {
                Ok(r) => break r,
                Err(e) if attempt < retries => {
                    attempt += 1;
                    log::debug!("sample {}: annotator retry {attempt}: {e}", sample.id);
                }
                Err(e) => return Err(ForgeError::Annotator { sample: sample.id.clone(), message: e.0 }),
            }
        };
        let label = if relevant { Label::Positive } else { Label::Negative };
        labeled.push(LabeledPassage { passage: p.clone(), label, provenance: Provenance::AnnotatorJudged });
    }
    let has = |l: Label, v: &[LabeledPassage]| v.iter().any(|x| x.label == l);
    if !has(Label::Positive, &labeled) || !has(Label::Negative, &labeled) {
        let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
        let ranked = rank_by_similarity(scorer, &sample.question, &texts)?;
        let (target, label) = if !has(Label::Positive, &labeled) {
            (ranked[0].0, Label::Positive)
        } else {
            (ranked[ranked.len() - 1].0, Label::Negative)
        };
        labeled[target].label = label;
        labeled[target].provenance = Provenance::SimilarityForced;
    }
    Ok(Annotation::Labeled(labeled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    NoRet,
    PosRel,
    HardNoRel,
    SoftNoRel,
    Stage1Pos,
    Stage1Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSegmentKind {
    Image,
    Question,
    ControlToken,
    Passage,
    Answer,
}

impl TrainSegmentKind {
    /// Only reflective tokens and the answer are supervised.
    pub fn supervised(self) -> bool {
        matches!(self, TrainSegmentKind::ControlToken | TrainSegmentKind::Answer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSegment {
    pub kind: TrainSegmentKind,
    pub payload: String,
}

/// One training example. `loss_mask` has one flag per segment; control
/// tokens are single tokens, so their flags are exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub kind: SequenceKind,
    pub sample_id: String,
    pub source: String,
    pub segments: Vec<TrainSegment>,
    pub loss_mask: Vec<bool>,
}

impl TrainingSequence {
    fn build(kind: SequenceKind, sample: &QuerySample, answer: &str, middle: Vec<TrainSegment>) -> Self {
        let mut segments = vec![
            TrainSegment { kind: TrainSegmentKind::Image, payload: sample.image_ref.clone() },
            TrainSegment { kind: TrainSegmentKind::Question, payload: sample.question.clone() },
        ];
        segments.extend(middle);
        segments.push(TrainSegment { kind: TrainSegmentKind::Answer, payload: answer.to_string() });
        let loss_mask = segments.iter().map(|s| s.kind.supervised()).collect();
        Self { kind, sample_id: sample.id.clone(), source: sample.dataset.clone(), segments, loss_mask }
    }

    fn with_passage(kind: SequenceKind, sample: &QuerySample, answer: &str, p: &Passage, judgment: ReflectiveToken) -> Self {
        Self::build(
            kind,
            sample,
            answer,
            vec![
                control(ReflectiveToken::Ret),
                TrainSegment {
                    kind: TrainSegmentKind::Passage,
                    payload: format!("{PARAGRAPH_OPEN}\n{}\n{PARAGRAPH_CLOSE}", p.text),
                },
                control(judgment),
            ],
        )
    }

    /// Mask flags agree with the segment kinds.
    pub fn mask_is_sound(&self) -> bool {
        self.loss_mask.len() == self.segments.len()
            && self.segments.iter().zip(&self.loss_mask).all(|(s, &m)| m == s.kind.supervised())
    }
}

fn control(t: ReflectiveToken) -> TrainSegment {
    TrainSegment { kind: TrainSegmentKind::ControlToken, payload: t.to_string() }
}

fn answer_of(sample: &QuerySample) -> Result<&str, ForgeError> {
    sample.primary_answer().ok_or_else(|| ForgeError::MissingAnswer(sample.id.clone()))
}

/// One sequence per labeled passage, in passage order.
pub fn emit_stage1_sequences(labeled: &[LabeledPassage], sample: &QuerySample) -> Result<Vec<TrainingSequence>, ForgeError> {
    let pos = labeled.iter().filter(|l| l.label == Label::Positive).count();
    if pos == 0 || pos == labeled.len() {
        return Err(ForgeError::Invariant(format!("sample `{}` needs at least one positive and one negative", sample.id)));
    }
    let answer = answer_of(sample)?;
    Ok(labeled
        .iter()
        .map(|l| match l.label {
            Label::Positive => {
                TrainingSequence::with_passage(SequenceKind::Stage1Pos, sample, answer, &l.passage, ReflectiveToken::Rel)
            }
            Label::Negative => {
                TrainingSequence::with_passage(SequenceKind::Stage1Neg, sample, answer, &l.passage, ReflectiveToken::NoRel)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Group {
    pub sample_id: String,
    pub passages: Vec<LabeledPassage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Dataset {
    pub groups: Vec<Stage1Group>,
    pub sequences: Vec<TrainingSequence>,
    pub skipped: Vec<Skipped>,
    pub report: MixtureReport,
}

type GroupWithSequences = (Stage1Group, Vec<TrainingSequence>);

/// Annotate the gold article of every sample and emit stage-1 sequences.
/// Samples without a usable gold article or whose annotation fails are
/// skipped and listed. Output is ordered by sample id.
pub fn build_stage1(
    annotator: &dyn PassageAnnotator,
    scorer: &dyn TextSimilarity,
    kb: &KnowledgeBase,
    samples: &[QuerySample],
    retries: u32,
) -> Result<Stage1Dataset, ForgeError> {
    let results: Vec<(String, Result<GroupWithSequences, String>)> = samples
        .par_iter()
        .map(|s| {
            let r = (|| {
                let gold = s.gold_doc_id.as_deref().ok_or_else(|| ForgeError::MissingGold(s.id.clone()))?;
                let passages = kb.passages_of(gold)?;
                match annotate_in_article(annotator, scorer, s, &passages, retries)? {
                    Annotation::Dropped(reason) => Err(ForgeError::Input(reason)),
                    Annotation::Labeled(labeled) => {
                        let seqs = emit_stage1_sequences(&labeled, s)?;
                        Ok((Stage1Group { sample_id: s.id.clone(), passages: labeled }, seqs))
                    }
                }
            })();
            (s.id.clone(), r.map_err(|e: ForgeError| e.to_string()))
        })
        .collect();
    let mut groups = Vec::new();
    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    let mut sorted = results;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, r) in sorted {
        match r {
            Ok((g, seqs)) => {
                groups.push(g);
                sequences.extend(seqs);
            }
            Err(reason) => {
                log::info!("stage 1: skipping sample {id}: {reason}");
                skipped.push(Skipped { sample_id: id, reason });
            }
        }
    }
    let report = MixtureReport::from_sequences(&sequences, BTreeMap::new());
    Ok(Stage1Dataset { groups, sequences, skipped, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Triplet {
    pub positive: Passage,
    pub hard_negative: Passage,
    pub soft_negative: Passage,
    /// The in-article model's judgments of the gold passages.
    pub judgments: Vec<RelevanceJudgment>,
}

impl Stage2Triplet {
    pub fn check(&self, gold_doc_id: &str) -> Result<(), ForgeError> {
        let ok = self.positive.doc_id == gold_doc_id
            && self.hard_negative.doc_id == gold_doc_id
            && self.soft_negative.doc_id != gold_doc_id
            && self.positive != self.hard_negative;
        ok.then_some(()).ok_or_else(|| ForgeError::Invariant(format!("bad triplet for gold document `{gold_doc_id}`")))
    }
}

/// Mine a positive, hard negative and soft negative for one sample.
pub fn mine_stage2_triplet(
    in_article: &dyn GenerativeBackend,
    index: &DenseIndex,
    kb: &KnowledgeBase,
    sample: &QuerySample,
    seed: u64,
) -> Result<Stage2Triplet, ForgeError> {
    let gold = sample.gold_doc_id.as_deref().ok_or_else(|| ForgeError::MissingGold(sample.id.clone()))?;
    let passages = kb.passages_of(gold)?;
    if passages.len() < 2 {
        return Err(ForgeError::SinglePassage(sample.id.clone()));
    }
    let engine = Engine::new(in_article);
    let judgments = passages.iter().map(|p| engine.judge_passage(sample, p)).collect::<Result<Vec<_>, _>>()?;

    let pos = (0..judgments.len()).fold(0, |best, i| if judgments[i].logp_rel > judgments[best].logp_rel { i } else { best });
    let others: Vec<usize> = (0..judgments.len()).filter(|&i| i != pos).collect();
    let norel: Vec<usize> = others.iter().copied().filter(|&i| judgments[i].token == ReflectiveToken::NoRel).collect();
    let hard = if norel.is_empty() {
        others.iter().copied().fold(others[0], |best, i| if judgments[i].logp_rel < judgments[best].logp_rel { i } else { best })
    } else {
        *norel.choose(&mut rng_for(seed, "hard_negative", &sample.id)).expect("non-empty")
    };

    let query = sample.image_embedding.as_deref().ok_or_else(|| ForgeError::MissingQueryEmbedding(sample.id.clone()))?;
    let mut k = 1;
    let soft_doc = loop {
        let hits = index.search(query, k)?;
        if let Some(h) = hits.iter().find(|h| h.doc_id != gold) {
            break h.doc_id.clone();
        }
        if k >= SOFT_NEGATIVE_MAX_K || hits.len() < k {
            return Err(ForgeError::NoSoftNegative(sample.id.clone()));
        }
        k = (k * 2).min(SOFT_NEGATIVE_MAX_K);
    };
    let soft = kb
        .passages_of(&soft_doc)?
        .into_iter()
        .choose(&mut rng_for(seed, "soft_negative", &sample.id))
        .ok_or_else(|| ForgeError::NoSoftNegative(sample.id.clone()))?;

    let triplet = Stage2Triplet {
        positive: passages[pos].clone(),
        hard_negative: passages[hard].clone(),
        soft_negative: soft,
        judgments,
    };
    triplet.check(gold)?;
    Ok(triplet)
}

/// Mine every sample that has a gold document, in parallel. Failures are
/// skipped and listed; output is ordered by sample id.
pub fn mine_stage2(
    in_article: &dyn GenerativeBackend,
    index: &DenseIndex,
    kb: &KnowledgeBase,
    samples: &[QuerySample],
    seed: u64,
) -> (Vec<(QuerySample, Stage2Triplet)>, Vec<Skipped>) {
    let mut results: Vec<_> = samples
        .par_iter()
        .filter(|s| s.gold_doc_id.is_some())
        .map(|s| (s, mine_stage2_triplet(in_article, index, kb, s, seed)))
        .collect();
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in results {
        match r {
            Ok(t) => ok.push((s.clone(), t)),
            Err(e) => {
                log::info!("stage 2: skipping sample {}: {e}", s.id);
                skipped.push(Skipped { sample_id: s.id.clone(), reason: e.to_string() });
            }
        }
    }
    (ok, skipped)
}

/// Counts by kind and by source dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub total: usize,
    pub by_kind: BTreeMap<SequenceKind, usize>,
    pub by_source: BTreeMap<String, BTreeMap<SequenceKind, usize>>,
    /// Kind counts before balancing (empty when nothing was balanced).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub before_balance: BTreeMap<SequenceKind, usize>,
}

impl MixtureReport {
    pub fn from_sequences(seqs: &[TrainingSequence], before_balance: BTreeMap<SequenceKind, usize>) -> Self {
        let mut r = MixtureReport { total: seqs.len(), before_balance, ..Default::default() };
        for s in seqs {
            *r.by_kind.entry(s.kind).or_default() += 1;
            *r.by_source.entry(s.source.clone()).or_default().entry(s.kind).or_default() += 1;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Dataset {
    pub sequences: Vec<TrainingSequence>,
    pub report: MixtureReport,
}

/// Emit the four stage-2 kinds and downsample each to the smallest kind's
/// size. Kinds appear in the order no-retrieval, positive, hard, soft; each
/// sorted by sample id.
pub fn emit_stage2_sequences(
    triplets: &[(QuerySample, Stage2Triplet)],
    noret_samples: &[QuerySample],
    seed: u64,
) -> Result<Stage2Dataset, ForgeError> {
    if triplets.is_empty() || noret_samples.is_empty() {
        return Err(ForgeError::Input("stage 2 needs both mined triplets and no-retrieval samples".into()));
    }
    let mut kinds: BTreeMap<SequenceKind, Vec<TrainingSequence>> = BTreeMap::new();
    for s in noret_samples {
        let a = answer_of(s)?;
        kinds.entry(SequenceKind::NoRet).or_default().push(TrainingSequence::build(
            SequenceKind::NoRet,
            s,
            a,
            vec![control(ReflectiveToken::NoRet)],
        ));
    }
    for (s, t) in triplets {
        let a = answer_of(s)?;
        for (kind, p, tok) in [
            (SequenceKind::PosRel, &t.positive, ReflectiveToken::Rel),
            (SequenceKind::HardNoRel, &t.hard_negative, ReflectiveToken::NoRel),
            (SequenceKind::SoftNoRel, &t.soft_negative, ReflectiveToken::NoRel),
        ] {
            kinds.entry(kind).or_default().push(TrainingSequence::with_passage(kind, s, a, p, tok));
        }
    }
    let order = [SequenceKind::NoRet, SequenceKind::PosRel, SequenceKind::HardNoRel, SequenceKind::SoftNoRel];
    let before: BTreeMap<SequenceKind, usize> = order.iter().map(|k| (*k, kinds.get(k).map_or(0, Vec::len))).collect();
    if let Some((k, _)) = before.iter().find(|(_, &n)| n == 0) {
        return Err(ForgeError::EmptyKind(*k));
    }
    let n = *before.values().min().expect("four kinds");
    let mut sequences = Vec::with_capacity(n * order.len());
    for kind in order {
        let mut seqs = kinds.remove(&kind).expect("present");
        seqs.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if seqs.len() > n {
            let mut rng = rng_for(seed, "balance", &format!("{kind:?}"));
            let mut keep: Vec<usize> = (0..seqs.len()).choose_multiple(&mut rng, n);
            keep.sort_unstable();
            seqs = keep.into_iter().map(|i| seqs[i].clone()).collect();
        }
        sequences.extend(seqs);
    }
    let report = MixtureReport::from_sequences(&sequences, before);
    Ok(Stage2Dataset { sequences, report })
}
