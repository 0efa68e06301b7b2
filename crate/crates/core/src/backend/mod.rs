//! The generative model as a constrained-decoding service.
//!
//! A backend receives a list of prompt segments, an optional explicit token
//! set and an optional length cap, and returns the emitted tokens with their
//! log-probabilities. Every result goes through [`constrained_generate`], which
//! rejects anything that breaks the contract instead of passing it on.

mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{CallKind, Matcher, MatchRule, MockBackend, ScriptFile, ScriptRule, ScriptedResponse};

pub const PARAGRAPH_OPEN: &str = "<paragraph>";
pub const PARAGRAPH_CLOSE: &str = "</paragraph>";

/// Slack allowed when checking that candidate probabilities sum to at most 1.
pub const PROBABILITY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReflectiveToken {
    #[serde(rename = "<RET>")]
    Ret,
    #[serde(rename = "<NORET>")]
    NoRet,
    #[serde(rename = "<REL>")]
    Rel,
    #[serde(rename = "<NOREL>")]
    NoRel,
}

impl ReflectiveToken {
    pub const ALL: [ReflectiveToken; 4] =
        [ReflectiveToken::Ret, ReflectiveToken::NoRet, ReflectiveToken::Rel, ReflectiveToken::NoRel];

    pub fn as_str(self) -> &'static str {
        match self {
            ReflectiveToken::Ret => "<RET>",
            ReflectiveToken::NoRet => "<NORET>",
            ReflectiveToken::Rel => "<REL>",
            ReflectiveToken::NoRel => "<NOREL>",
        }
    }
}

impl fmt::Display for ReflectiveToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReflectiveToken {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReflectiveToken::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| BackendError::InvalidRequest(format!("`{s}` is not a reflective token")))
    }
}

/// Tokens added on top of the base vocabulary. None of them may appear in
/// free-form generation over the base vocabulary.
pub fn control_vocabulary() -> Vec<String> {
    ReflectiveToken::ALL
        .iter()
        .map(|t| t.as_str().to_string())
        .chain([PARAGRAPH_OPEN.to_string(), PARAGRAPH_CLOSE.to_string()])
        .collect()
}

fn is_control_token(tok: &str) -> bool {
    tok == PARAGRAPH_OPEN || tok == PARAGRAPH_CLOSE || ReflectiveToken::from_str(tok).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    System,
    ImageRef,
    UserText,
    ControlToken,
    PassageBlock,
    AssistantStart,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSegment {
    pub kind: SegmentKind,
    pub payload: String,
}

impl PromptSegment {
    pub fn system(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::System, payload: text.into() }
    }

    pub fn image(reference: impl Into<String>) -> Self {
        Self { kind: SegmentKind::ImageRef, payload: reference.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::UserText, payload: text.into() }
    }

    pub fn control(token: ReflectiveToken) -> Self {
        Self { kind: SegmentKind::ControlToken, payload: token.as_str().to_string() }
    }

    /// A passage wrapped in paragraph markers.
    pub fn passage(body: &str) -> Self {
        Self { kind: SegmentKind::PassageBlock, payload: format!("{PARAGRAPH_OPEN}\n{body}\n{PARAGRAPH_CLOSE}") }
    }

    pub fn assistant_start() -> Self {
        Self { kind: SegmentKind::AssistantStart, payload: String::new() }
    }
}

/// Stable hash of the canonical (compact JSON) serialization of a segment list.
pub fn fingerprint(segments: &[PromptSegment]) -> String {
    let canonical = serde_json::to_vec(segments).expect("segments serialize");
    hex::encode(&Sha256::digest(&canonical)[..8])
}

/// Which tokens a generation step may emit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocabulary {
    /// The model's original vocabulary, without any control token.
    Base,
    /// An explicit token set.
    Tokens(Vec<String>),
}

impl Vocabulary {
    pub fn of(tokens: &[ReflectiveToken]) -> Self {
        Vocabulary::Tokens(tokens.iter().map(|t| t.as_str().to_string()).collect())
    }

    pub fn allows(&self, tok: &str) -> bool {
        match self {
            Vocabulary::Base => !is_control_token(tok),
            Vocabulary::Tokens(set) => set.iter().any(|t| t == tok),
        }
    }
}

/// Wire request for `POST /v1/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub segments: Vec<PromptSegment>,
    pub allowed_tokens: Option<Vec<String>>,
    pub max_tokens: Option<usize>,
}

impl GenerationRequest {
    pub fn vocabulary(&self) -> Vocabulary {
        match &self.allowed_tokens {
            None => Vocabulary::Base,
            Some(t) => Vocabulary::Tokens(t.clone()),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.segments)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GenerationResult {
    pub tokens: Vec<String>,
    pub chosen_logprobs: Vec<f64>,
    /// Per step, log-probability of each allowed token the backend scored.
    #[serde(rename = "candidates")]
    pub candidate_logprobs: Vec<BTreeMap<String, f64>>,
}

impl GenerationResult {
    /// Emitted text, trimmed.
    pub fn text(&self) -> String {
        self.tokens.concat().trim().to_string()
    }

    /// Log-probability of `tok` at the first step, if the backend scored it.
    pub fn first_step_logprob(&self, tok: &str) -> Option<f64> {
        self.candidate_logprobs.first().and_then(|m| m.get(tok)).copied()
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unscripted prompt (fingerprint {fingerprint}): {summary}")]
    Unscripted { fingerprint: String, summary: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend does not declare control tokens: {0:?}")]
    MissingControlTokens(Vec<String>),
}

pub trait GenerativeBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Control tokens the model was extended with.
    fn control_tokens(&self) -> Vec<String> {
        control_vocabulary()
    }

    /// How far above 1 a step's candidate probability mass may be.
    fn probability_slack(&self) -> f64 {
        PROBABILITY_SLACK
    }
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }

    fn control_tokens(&self) -> Vec<String> {
        (**self).control_tokens()
    }

    fn probability_slack(&self) -> f64 {
        (**self).probability_slack()
    }
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for std::sync::Arc<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }

    fn control_tokens(&self) -> Vec<String> {
        (**self).control_tokens()
    }

    fn probability_slack(&self) -> f64 {
        (**self).probability_slack()
    }
}

/// Check that the backend understands every reflective token and both paragraph markers.
pub fn check_vocabulary(backend: &dyn GenerativeBackend) -> Result<(), BackendError> {
    let declared = backend.control_tokens();
    let missing: Vec<String> = control_vocabulary().into_iter().filter(|t| !declared.contains(t)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(BackendError::MissingControlTokens(missing))
    }
}

/// Run one generation and enforce the vocabulary and length contract on the result.
pub fn constrained_generate(
    backend: &dyn GenerativeBackend,
    prompt: &[PromptSegment],
    allowed: &Vocabulary,
    max_tokens: Option<usize>,
) -> Result<GenerationResult, BackendError> {
    if prompt.is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }
    if max_tokens == Some(0) {
        return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
    }
    let request = GenerationRequest {
        segments: prompt.to_vec(),
        allowed_tokens: match allowed {
            Vocabulary::Base => None,
            Vocabulary::Tokens(t) => Some(t.clone()),
        },
        max_tokens,
    };
    let result = backend.generate(&request)?;
    validate_result_with_slack(&result, allowed, max_tokens, backend.probability_slack())?;
    Ok(result)
}

/// Contract checks applied to every backend result.
pub fn validate_result(
    result: &GenerationResult,
    allowed: &Vocabulary,
    max_tokens: Option<usize>,
) -> Result<(), BackendError> {
    validate_result_with_slack(result, allowed, max_tokens, PROBABILITY_SLACK)
}

/// As [`validate_result`], with an explicit allowance on the per-step
/// probability mass.
pub fn validate_result_with_slack(
    result: &GenerationResult,
    allowed: &Vocabulary,
    max_tokens: Option<usize>,
    slack: f64,
) -> Result<(), BackendError> {
    let violation = |m: String| Err(BackendError::ProtocolViolation(m));
    let steps = result.tokens.len();
    if result.chosen_logprobs.len() != steps {
        return violation(format!("{} tokens but {} chosen log-probs", steps, result.chosen_logprobs.len()));
    }
    if let Some(max) = max_tokens {
        if steps > max {
            return violation(format!("{steps} tokens emitted, max_tokens is {max}"));
        }
    }
    for (i, tok) in result.tokens.iter().enumerate() {
        if !allowed.allows(tok) {
            return violation(format!("step {i}: token `{tok}` is outside the allowed vocabulary"));
        }
    }
    if result.chosen_logprobs.iter().any(|lp| !lp.is_finite() || *lp > PROBABILITY_SLACK) {
        return violation("chosen log-probs must be finite and <= 0".into());
    }
    match allowed {
        Vocabulary::Tokens(_) => {
            if steps == 0 {
                return violation("constrained step produced no token".into());
            }
            if result.candidate_logprobs.len() != steps {
                return violation(format!(
                    "{} candidate maps for {} steps; every constrained step needs one",
                    result.candidate_logprobs.len(),
                    steps
                ));
            }
        }
        Vocabulary::Base => {
            if !result.candidate_logprobs.is_empty() && result.candidate_logprobs.len() != steps {
                return violation("candidate map count does not match step count".into());
            }
        }
    }
    for (i, cands) in result.candidate_logprobs.iter().enumerate() {
        if cands.is_empty() {
            if matches!(allowed, Vocabulary::Tokens(_)) {
                return violation(format!("step {i}: empty candidate map"));
            }
            continue;
        }
        if let Some(bad) = cands.keys().find(|t| !allowed.allows(t)) {
            return violation(format!("step {i}: candidate `{bad}` is outside the allowed vocabulary"));
        }
        if cands.values().any(|lp| !lp.is_finite()) {
            return violation(format!("step {i}: non-finite candidate log-prob"));
        }
        if !cands.contains_key(&result.tokens[i]) {
            return violation(format!("step {i}: chosen token `{}` missing from candidates", result.tokens[i]));
        }
        let mass: f64 = cands.values().map(|lp| lp.exp()).sum();
        if mass > 1.0 + slack {
            return violation(format!("step {i}: candidate probabilities sum to {mass}"));
        }
    }
    Ok(())
}
