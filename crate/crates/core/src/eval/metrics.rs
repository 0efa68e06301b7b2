//! Answer-level metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::{normalize_answer, normalized_tokens};

/// Relative tolerance for numeric answers.
pub const DEFAULT_REL_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    VqaAccuracy,
    RelaxedAccuracy,
    TokenF1,
    ExactMatch,
    RecallAtK,
    TokenAccuracy,
    /// Score from an external answer judge.
    JudgeScore,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::VqaAccuracy => "vqa_accuracy",
            MetricName::RelaxedAccuracy => "relaxed_accuracy",
            MetricName::TokenF1 => "token_f1",
            MetricName::ExactMatch => "exact_match",
            MetricName::RecallAtK => "recall_at_k",
            MetricName::TokenAccuracy => "token_accuracy",
            MetricName::JudgeScore => "judge_score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub name: MetricName,
    pub value: f64,
    pub num_samples: usize,
}

impl MetricScore {
    /// Mean of `values`; `None` when empty.
    pub fn mean(name: MetricName, values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Self { name, value: values.iter().sum::<f64>() / values.len() as f64, num_samples: values.len() })
    }
}

/// 1 if the normalized prediction equals any normalized gold answer.
pub fn vqa_accuracy(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

/// A gold answer counts as numeric only if the whole string is a number
/// (thousands separators allowed).
pub fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim().replace(',', "");
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// First number appearing in a prediction ("about 104 km/h" → 104).
pub fn first_number(text: &str) -> Option<f64> {
    if let Some(v) = parse_number(text) {
        return Some(v);
    }
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let neg = b[i] == b'-' && i + 1 < b.len() && b[i + 1].is_ascii_digit();
        if b[i].is_ascii_digit() || neg {
            let start = i;
            i += 1;
            let mut seen_dot = false;
            while i < b.len() {
                let c = b[i];
                if c.is_ascii_digit() || (c == b',' && i + 1 < b.len() && b[i + 1].is_ascii_digit()) {
                    i += 1;
                } else if c == b'.' && !seen_dot && i + 1 < b.len() && b[i + 1].is_ascii_digit() {
                    seen_dot = true;
                    i += 1;
                } else {
                    break;
                }
            }
            return parse_number(&text[start..i]);
        }
        i += 1;
    }
    None
}

/// Numeric golds match within `rel_tol` relative error (a gold of 0 needs an
/// exact 0); non-numeric golds use [`vqa_accuracy`].
pub fn relaxed_accuracy(pred: &str, golds: &[String], rel_tol: f64) -> f64 {
    let pred_num = first_number(pred);
    for g in golds {
        match parse_number(g) {
            Some(gv) => {
                if let Some(pv) = pred_num {
                    let ok = if gv == 0.0 { pv == 0.0 } else { (pv - gv).abs() <= rel_tol * gv.abs() };
                    if ok {
                        return 1.0;
                    }
                }
            }
            None => {
                if vqa_accuracy(pred, std::slice::from_ref(g)) == 1.0 {
                    return 1.0;
                }
            }
        }
    }
    0.0
}

/// Bag-of-tokens F1 and exact match over normalized tokens.
pub fn token_f1_em(pred: &str, gold: &str) -> (f64, f64) {
    let p = normalized_tokens(pred);
    let g = normalized_tokens(gold);
    if p.is_empty() || g.is_empty() {
        let both = p.is_empty() && g.is_empty();
        return if both { (1.0, 1.0) } else { (0.0, 0.0) };
    }
    let em = if p == g { 1.0 } else { 0.0 };
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (0.0, em);
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    (2.0 * precision * recall / (precision + recall), em)
}

/// Best F1 and EM over several gold answers.
pub fn best_f1_em(pred: &str, golds: &[String]) -> (f64, f64) {
    golds.iter().map(|g| token_f1_em(pred, g)).fold((0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Overall InfoSeek score: harmonic mean of the unseen-question and
/// unseen-entity scores (0 if either is 0). Scale-preserving.
pub fn infoseek_aggregate(unseen_q: f64, unseen_e: f64) -> f64 {
    if unseen_q == 0.0 || unseen_e == 0.0 {
        return 0.0;
    }
    2.0 * unseen_q * unseen_e / (unseen_q + unseen_e)
}

/// Round half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
