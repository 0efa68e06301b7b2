//! Scripted backend for deterministic protocol tests.
//!
//! Rules are checked in registration order and the first match answers. Rules
//! are fixed once the backend is shared, so `generate` only reads them; the call
//! counters are atomics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    control_vocabulary, BackendError, GenerationRequest, GenerationResult, GenerativeBackend, ReflectiveToken,
    SegmentKind,
};

/// What a request is asking for, judged from its vocabulary restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    /// `{<RET>, <NORET>}`
    Decision,
    /// `{<REL>, <NOREL>}`
    Judgment,
    /// Free generation over the base vocabulary.
    Answer,
    Other,
}

impl CallKind {
    pub fn of(request: &GenerationRequest) -> Self {
        let Some(allowed) = &request.allowed_tokens else {
            return CallKind::Answer;
        };
        let has = |t: ReflectiveToken| allowed.iter().any(|a| a == t.as_str());
        if allowed.len() == 2 && has(ReflectiveToken::Ret) && has(ReflectiveToken::NoRet) {
            CallKind::Decision
        } else if allowed.len() == 2 && has(ReflectiveToken::Rel) && has(ReflectiveToken::NoRel) {
            CallKind::Judgment
        } else {
            CallKind::Other
        }
    }

    fn slot(self) -> usize {
        match self {
            CallKind::Decision => 0,
            CallKind::Judgment => 1,
            CallKind::Answer => 2,
            CallKind::Other => 3,
        }
    }
}

/// Declarative matcher; every field that is set must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Exact text of the first user-text segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<CallKind>,
    /// Substring of at least one passage block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_contains: Option<String>,
    /// Substring of any segment payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_contains: Option<String>,
}

impl MatchRule {
    pub fn question(q: impl Into<String>) -> Self {
        Self { question: Some(q.into()), ..Self::default() }
    }

    pub fn stage(mut self, stage: CallKind) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn passage_contains(mut self, s: impl Into<String>) -> Self {
        self.passage_contains = Some(s.into());
        self
    }

    pub fn matches(&self, request: &GenerationRequest) -> bool {
        if let Some(fp) = &self.fingerprint {
            if &request.fingerprint() != fp {
                return false;
            }
        }
        if let Some(stage) = self.stage {
            if CallKind::of(request) != stage {
                return false;
            }
        }
        if let Some(q) = &self.question {
            let first_user = request.segments.iter().find(|s| s.kind == SegmentKind::UserText);
            if first_user.map(|s| &s.payload) != Some(q) {
                return false;
            }
        }
        if let Some(p) = &self.passage_contains {
            if !request
                .segments
                .iter()
                .any(|s| s.kind == SegmentKind::PassageBlock && s.payload.contains(p.as_str()))
            {
                return false;
            }
        }
        if let Some(t) = &self.text_contains {
            if !request.segments.iter().any(|s| s.payload.contains(t.as_str())) {
                return false;
            }
        }
        true
    }
}

type Predicate = Arc<dyn Fn(&GenerationRequest) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Matcher {
    Rule(MatchRule),
    Custom(Predicate),
}

impl Matcher {
    pub fn custom(f: impl Fn(&GenerationRequest) -> bool + Send + Sync + 'static) -> Self {
        Matcher::Custom(Arc::new(f))
    }

    fn matches(&self, request: &GenerationRequest) -> bool {
        match self {
            Matcher::Rule(r) => r.matches(request),
            Matcher::Custom(f) => f(request),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Rule(r) => f.debug_tuple("Rule").field(r).finish(),
            Matcher::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl From<MatchRule> for Matcher {
    fn from(r: MatchRule) -> Self {
        Matcher::Rule(r)
    }
}

/// A canned response. In script files:
/// `{"choice": {"<RET>": -0.2, "<NORET>": -1.8}}` emits the arg-max token,
/// `{"text": "Black"}` emits free text, and the full wire form is accepted too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Choice { choice: BTreeMap<String, f64> },
    Text { text: String },
    Full(GenerationResult),
}

impl ScriptedResponse {
    pub fn choice<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        ScriptedResponse::Choice { choice: pairs.into_iter().map(|(t, lp)| (t.to_string(), lp)).collect() }
    }

    pub fn tokens(a: ReflectiveToken, logp_a: f64, b: ReflectiveToken, logp_b: f64) -> Self {
        Self::choice([(a.as_str(), logp_a), (b.as_str(), logp_b)])
    }

    pub fn text(t: impl Into<String>) -> Self {
        ScriptedResponse::Text { text: t.into() }
    }

    fn to_result(&self) -> GenerationResult {
        match self {
            ScriptedResponse::Choice { choice } => {
                // first maximum in key order
                let (tok, lp) = choice
                    .iter()
                    .fold(None::<(&String, f64)>, |best, (t, &lp)| match best {
                        Some((_, b)) if b >= lp => best,
                        _ => Some((t, lp)),
                    })
                    .map(|(t, lp)| (t.clone(), lp))
                    .unwrap_or_default();
                GenerationResult {
                    tokens: vec![tok],
                    chosen_logprobs: vec![lp],
                    candidate_logprobs: vec![choice.clone()],
                }
            }
            ScriptedResponse::Text { text } => GenerationResult {
                tokens: vec![text.clone()],
                chosen_logprobs: vec![0.0],
                candidate_logprobs: vec![],
            },
            ScriptedResponse::Full(r) => r.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: MatchRule,
    pub response: ScriptedResponse,
}

/// On-disk script: `{"rules": [{"match": {...}, "response": {...}}, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub rules: Vec<ScriptRule>,
}

impl ScriptFile {
    pub fn push(&mut self, matcher: MatchRule, response: ScriptedResponse) {
        self.rules.push(ScriptRule { matcher, response });
    }
}

/// Scripts hold hand-rounded log-probs (e.g. -0.1 / -2.3, mass 1.005), so the
/// mock tolerates a little more mass than a real model would.
pub const SCRIPT_PROBABILITY_SLACK: f64 = 0.01;

#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<(Matcher, ScriptedResponse)>,
    counts: [AtomicUsize; 4],
    declared: Vec<String>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self { rules: Vec::new(), counts: Default::default(), declared: control_vocabulary() }
    }

    pub fn from_script(script: ScriptFile) -> Self {
        let mut m = Self::new();
        for r in script.rules {
            m.register_script(r.matcher, r.response);
        }
        m
    }

    pub fn from_script_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let script: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Ok(Self::from_script(script))
    }

    /// Override the declared control tokens (conformance tests).
    pub fn with_control_tokens(mut self, tokens: Vec<String>) -> Self {
        self.declared = tokens;
        self
    }

    /// Add a rule. Earlier registrations take priority over later ones.
    pub fn register_script(&mut self, matcher: impl Into<Matcher>, response: ScriptedResponse) {
        self.rules.push((matcher.into(), response));
    }

    pub fn calls(&self, kind: CallKind) -> usize {
        self.counts[kind.slot()].load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }
}

fn summarize(request: &GenerationRequest) -> String {
    let question = request
        .segments
        .iter()
        .find(|s| s.kind == SegmentKind::UserText)
        .map(|s| s.payload.as_str())
        .unwrap_or("");
    let passages = request.segments.iter().filter(|s| s.kind == SegmentKind::PassageBlock).count();
    format!("{:?} call, question {:?}, {} passage(s)", CallKind::of(request), question, passages)
}

impl GenerativeBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.counts[CallKind::of(request).slot()].fetch_add(1, Ordering::Relaxed);
        self.rules
            .iter()
            .find(|(m, _)| m.matches(request))
            .map(|(_, r)| r.to_result())
            .ok_or_else(|| BackendError::Unscripted { fingerprint: request.fingerprint(), summary: summarize(request) })
    }

    fn control_tokens(&self) -> Vec<String> {
        self.declared.clone()
    }

    fn probability_slack(&self) -> f64 {
        SCRIPT_PROBABILITY_SLACK
    }
}
