//! Accuracy of the reflective tokens themselves.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::backend::ReflectiveToken;
use crate::engine::{PipelineTrace, Probe, RelevanceJudgment, RetrievalDecision};
use crate::eval::report::EvalError;
use crate::kb::Passage;

/// How a probed passage relates to the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Relevant; `<REL>` expected.
    Positive,
    /// Irrelevant passage from another document; `<NOREL>` expected.
    Soft,
    /// Irrelevant passage from the gold document; `<NOREL>` expected.
    Hard,
}

impl Difficulty {
    pub fn expected(self) -> ReflectiveToken {
        match self {
            Difficulty::Positive => ReflectiveToken::Rel,
            _ => ReflectiveToken::NoRel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePassage {
    pub passage: Passage,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenExpectation {
    pub sample_id: String,
    /// `<RET>` or `<NORET>`.
    pub decision: ReflectiveToken,
    #[serde(default)]
    pub passages: Vec<ProbePassage>,
}

/// What the model emitted for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenObservation {
    pub sample_id: String,
    pub decision: RetrievalDecision,
    pub judgments: Vec<RelevanceJudgment>,
}

impl TokenObservation {
    pub fn from_trace(t: &PipelineTrace) -> Self {
        Self { sample_id: t.sample_id.clone(), decision: t.decision.clone(), judgments: t.judgments.clone() }
    }

    pub fn from_probe(sample_id: impl Into<String>, p: Probe) -> Self {
        Self { sample_id: sample_id.into(), decision: p.decision, judgments: p.judgments }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

/// Rows: `<RET>`, `<NORET>`, `<REL>` (positive), `<NOREL>` (soft), `<NOREL>` (hard).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracyReport {
    pub ret: Accuracy,
    pub noret: Accuracy,
    pub rel_positive: Accuracy,
    pub norel_soft: Accuracy,
    pub norel_hard: Accuracy,
    /// Expected token → emitted token → count, decisions and judgments together.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Compare the model's own tokens (before any forced override) against
/// expectations. Every expectation must have an observation, and every
/// expected passage a judgment.
pub fn token_accuracy(
    observations: &[TokenObservation],
    expectations: &[TokenExpectation],
) -> Result<TokenAccuracyReport, EvalError> {
    let by_id: HashMap<&str, &TokenObservation> = observations.iter().map(|o| (o.sample_id.as_str(), o)).collect();
    let mut r = TokenAccuracyReport::default();
    let mut confuse = |exp: ReflectiveToken, got: ReflectiveToken| {
        *r.confusion.entry(exp.to_string()).or_default().entry(got.to_string()).or_default() += 1;
    };
    let mut rows: [Accuracy; 5] = Default::default();
    for e in expectations {
        let o = by_id
            .get(e.sample_id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("no observation for sample `{}`", e.sample_id)))?;
        let got = o.decision.model_token;
        match e.decision {
            ReflectiveToken::Ret => rows[0].add(got == ReflectiveToken::Ret),
            ReflectiveToken::NoRet => rows[1].add(got == ReflectiveToken::NoRet),
            other => return Err(EvalError::Mismatch(format!("sample `{}`: decision expectation {other}", e.sample_id))),
        }
        confuse(e.decision, got);
        for pp in &e.passages {
            let j = o.judgments.iter().find(|j| j.passage == pp.passage).ok_or_else(|| {
                EvalError::Mismatch(format!(
                    "sample `{}`: passage {}#{} was not judged",
                    e.sample_id, pp.passage.doc_id, pp.passage.section_index
                ))
            })?;
            let slot = match pp.difficulty {
                Difficulty::Positive => 2,
                Difficulty::Soft => 3,
                Difficulty::Hard => 4,
            };
            rows[slot].add(j.token == pp.difficulty.expected());
            confuse(pp.difficulty.expected(), j.token);
        }
    }
    [r.ret, r.noret, r.rel_positive, r.norel_soft, r.norel_hard] = rows;
    Ok(r)
}
