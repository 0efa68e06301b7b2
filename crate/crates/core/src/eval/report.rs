//! Scoring traces against samples and assembling reports.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ReflectiveToken;
use crate::engine::PipelineTrace;
use crate::eval::judge::{AnswerJudge, JudgeError};
use crate::eval::metrics::{best_f1_em, infoseek_aggregate, relaxed_accuracy, vqa_accuracy, MetricName, MetricScore, DEFAULT_REL_TOL};
use crate::sample::{Category, QuerySample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    /// Unseen-question / unseen-entity splits; overall = harmonic mean.
    InfoSeek,
    /// Single-hop split; overall = plain mean over every question.
    EncyclopedicVqa,
    Other,
}

impl DatasetFamily {
    pub fn of(dataset: &str) -> Self {
        let d: String = dataset.to_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        if d.contains("infoseek") {
            DatasetFamily::InfoSeek
        } else if d.contains("evqa") || d.contains("encyclopedic") {
            DatasetFamily::EncyclopedicVqa
        } else {
            DatasetFamily::Other
        }
    }

    /// Headline metric when no judge is plugged in.
    pub fn primary_metric(self) -> MetricName {
        match self {
            DatasetFamily::InfoSeek => MetricName::RelaxedAccuracy,
            _ => MetricName::VqaAccuracy,
        }
    }
}

#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub rel_tol: f64,
    pub judge: Option<&'a dyn AnswerJudge>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { rel_tol: DEFAULT_REL_TOL, judge: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trace for unknown sample `{0}`")]
    UnknownSample(String),
    #[error("duplicate trace for sample `{0}`")]
    DuplicateTrace(String),
    #[error("sample `{0}` has no gold answers")]
    NoGold(String),
    #[error("sample `{id}`: {source}")]
    Judge { id: String, source: JudgeError },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub dataset: String,
    pub category: Option<Category>,
    pub vqa_accuracy: f64,
    pub relaxed_accuracy: f64,
    pub token_f1: f64,
    pub exact_match: f64,
    /// Dataset's headline score (judge score when a judge is used).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub split: String,
    pub value: f64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub family: DatasetFamily,
    pub accuracy_metric: String,
    pub splits: Vec<SplitScore>,
    pub metrics: Vec<MetricScore>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub num_traces: usize,
    /// Effective decisions, keyed by token.
    pub decisions: BTreeMap<String, usize>,
    pub forced_decisions: usize,
    /// Fraction of retrieval traces that used the empty-set fallback.
    pub fallback_rate: f64,
    /// Mean |S| over retrieval traces.
    pub mean_selected: f64,
    pub mean_candidates: f64,
    pub failed_judgments: usize,
}

impl TraceStats {
    pub fn from_traces(traces: &[PipelineTrace]) -> Self {
        let mut s = TraceStats { num_traces: traces.len(), ..Default::default() };
        for t in ReflectiveToken::ALL[..2].iter() {
            s.decisions.insert(t.to_string(), 0);
        }
        let mut ret = 0usize;
        let (mut fb, mut sel, mut cand) = (0usize, 0usize, 0usize);
        for t in traces {
            *s.decisions.entry(t.decision.token.to_string()).or_default() += 1;
            s.forced_decisions += t.decision.forced as usize;
            s.failed_judgments += t.failed_judgments.len();
            if t.decision.token == ReflectiveToken::Ret {
                ret += 1;
                fb += t.fallback as usize;
                sel += t.selected.len();
                cand += t.candidates.len();
            }
        }
        if ret > 0 {
            s.fallback_rate = fb as f64 / ret as f64;
            s.mean_selected = sel as f64 / ret as f64;
            s.mean_candidates = cand as f64 / ret as f64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    /// Mean headline accuracy over every scored sample.
    pub accuracy: f64,
    /// Samples with no trace (the pipeline failed on them).
    pub missing_traces: Vec<String>,
    pub metrics: Vec<MetricScore>,
    pub datasets: BTreeMap<String, DatasetReport>,
    pub trace_stats: TraceStats,
}

impl EvalReport {
    /// Headline "All" score of a dataset.
    pub fn all(&self, dataset: &str) -> Option<f64> {
        self.datasets.get(dataset)?.splits.iter().find(|s| s.split == "all").map(|s| s.value)
    }

    /// Long-format table: `dataset,split,value,num_samples`, then overall metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,split,value,num_samples\n");
        for (name, d) in &self.datasets {
            for s in &d.splits {
                out.push_str(&format!("{},{},{:.4},{}\n", csv_field(name), s.split, s.value, s.num_samples));
            }
        }
        for m in &self.metrics {
            out.push_str(&format!("*,{},{:.4},{}\n", m.name.as_str(), m.value, m.num_samples));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Score one prediction.
pub fn score_sample(sample: &QuerySample, answer: &str, opts: &EvalOptions) -> Result<SampleScore, EvalError> {
    if sample.gold_answers.is_empty() {
        return Err(EvalError::NoGold(sample.id.clone()));
    }
    let vqa = vqa_accuracy(answer, &sample.gold_answers);
    let relaxed = relaxed_accuracy(answer, &sample.gold_answers, opts.rel_tol);
    let (f1, em) = best_f1_em(answer, &sample.gold_answers);
    let accuracy = match opts.judge {
        Some(j) => j.judge(sample, answer).map_err(|source| EvalError::Judge { id: sample.id.clone(), source })?,
        None => match DatasetFamily::of(&sample.dataset).primary_metric() {
            MetricName::RelaxedAccuracy => relaxed,
            _ => vqa,
        },
    };
    Ok(SampleScore {
        sample_id: sample.id.clone(),
        dataset: sample.dataset.clone(),
        category: sample.category,
        vqa_accuracy: vqa,
        relaxed_accuracy: relaxed,
        token_f1: f1,
        exact_match: em,
        accuracy,
    })
}

fn mean(v: &[f64]) -> Option<(f64, usize)> {
    (!v.is_empty()).then(|| (v.iter().sum::<f64>() / v.len() as f64, v.len()))
}

fn metric_block(scores: &[&SampleScore]) -> Vec<MetricScore> {
    let col = |f: fn(&SampleScore) -> f64| scores.iter().map(|s| f(s)).collect::<Vec<_>>();
    [
        (MetricName::VqaAccuracy, col(|s| s.vqa_accuracy)),
        (MetricName::RelaxedAccuracy, col(|s| s.relaxed_accuracy)),
        (MetricName::TokenF1, col(|s| s.token_f1)),
        (MetricName::ExactMatch, col(|s| s.exact_match)),
    ]
    .into_iter()
    .filter_map(|(n, v)| MetricScore::mean(n, &v))
    .collect()
}

fn dataset_report(scores: &[&SampleScore], judged: Option<&str>) -> DatasetReport {
    let family = DatasetFamily::of(&scores[0].dataset);
    let acc = |filter: &dyn Fn(&SampleScore) -> bool| {
        mean(&scores.iter().filter(|s| filter(s)).map(|s| s.accuracy).collect::<Vec<_>>())
    };
    let mut splits = Vec::new();
    let mut push = |name: &str, v: Option<(f64, usize)>| {
        if let Some((value, n)) = v {
            splits.push(SplitScore { split: name.to_string(), value, num_samples: n });
        }
    };
    let overall = acc(&|_| true);
    match family {
        DatasetFamily::InfoSeek => {
            let q = acc(&|s| s.category == Some(Category::UnseenQuestion));
            let e = acc(&|s| s.category == Some(Category::UnseenEntity));
            push("unseen_question", q);
            push("unseen_entity", e);
            match (q, e) {
                (Some((qv, qn)), Some((ev, en))) => push("all", Some((infoseek_aggregate(qv, ev), qn + en))),
                _ => push("all", overall),
            }
        }
        DatasetFamily::EncyclopedicVqa => {
            push("single_hop", acc(&|s| s.category == Some(Category::SingleHop)));
            push("all", overall);
        }
        DatasetFamily::Other => push("all", overall),
    }
    let accuracy_metric = judged.map(str::to_string).unwrap_or_else(|| family.primary_metric().as_str().to_string());
    DatasetReport { family, accuracy_metric, splits, metrics: metric_block(scores) }
}

/// Score `traces` against `samples`. Samples without a trace are listed in
/// `missing_traces` and excluded from the scores.
pub fn evaluate(samples: &[QuerySample], traces: &[PipelineTrace], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &QuerySample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = HashMap::new();
    for t in traces {
        if !by_id.contains_key(t.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(t.sample_id.clone()));
        }
        if seen.insert(t.sample_id.as_str(), ()).is_some() {
            return Err(EvalError::DuplicateTrace(t.sample_id.clone()));
        }
    }
    let mut scores = traces
        .par_iter()
        .map(|t| score_sample(by_id[t.sample_id.as_str()], &t.answer, opts))
        .collect::<Result<Vec<_>, _>>()?;
    scores.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut missing: Vec<String> =
        samples.iter().filter(|s| !seen.contains_key(s.id.as_str())).map(|s| s.id.clone()).collect();
    missing.sort();

    let mut groups: BTreeMap<&str, Vec<&SampleScore>> = BTreeMap::new();
    for s in &scores {
        groups.entry(s.dataset.as_str()).or_default().push(s);
    }
    let judged = opts.judge.map(|j| j.name());
    let datasets = groups.into_iter().map(|(k, v)| (k.to_string(), dataset_report(&v, judged))).collect();
    let all: Vec<&SampleScore> = scores.iter().collect();
    let accuracy = mean(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>()).map_or(0.0, |m| m.0);
    Ok(EvalReport {
        num_samples: samples.len(),
        accuracy,
        missing_traces: missing,
        metrics: metric_block(&all),
        datasets,
        trace_stats: TraceStats::from_traces(traces),
    })
}
