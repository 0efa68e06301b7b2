//! Inference-time ablations of the reflective tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineError, ForceDecision, PassageSelection, PipelineConfig, PipelineTrace, Rerank};
use crate::eval::report::{evaluate, EvalError, EvalOptions, EvalReport};
use crate::sample::QuerySample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationName {
    Full,
    /// Retrieval forced on every sample.
    AlwaysRet,
    /// Relevance tokens replaced by the top passages of a text scorer.
    ExternalScorerPassages,
    /// Relevance tokens replaced by random passages per retrieved document.
    RandomPassagesNoRel,
    /// Retrieval forced off.
    NoKb,
}

impl AblationName {
    pub const ALL: [AblationName; 5] = [
        AblationName::Full,
        AblationName::AlwaysRet,
        AblationName::ExternalScorerPassages,
        AblationName::RandomPassagesNoRel,
        AblationName::NoKb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationName::Full => "full",
            AblationName::AlwaysRet => "always_ret",
            AblationName::ExternalScorerPassages => "external_scorer_passages",
            AblationName::RandomPassagesNoRel => "random_passages_no_rel",
            AblationName::NoKb => "no_kb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: AblationName,
    pub config: PipelineConfig,
}

/// Passages kept per variant where the configuration needs a count.
pub const SCORER_TOP_N: usize = 2;
pub const RANDOM_PER_DOC: usize = 2;

impl AblationVariant {
    /// The variant's configuration, derived from `base` (k, seed, caps).
    pub fn new(name: AblationName, base: &PipelineConfig) -> Self {
        let mut config = PipelineConfig {
            force_decision: ForceDecision::None,
            passage_selection: PassageSelection::Reflective,
            ..base.clone()
        };
        match name {
            AblationName::Full => {}
            AblationName::AlwaysRet => config.force_decision = ForceDecision::AlwaysRet,
            AblationName::ExternalScorerPassages => {
                config.rerank = Rerank::None;
                config.passage_selection = PassageSelection::ExternalScorer { top_n: SCORER_TOP_N };
            }
            AblationName::RandomPassagesNoRel => {
                config.rerank = Rerank::None;
                config.passage_selection = PassageSelection::RandomPerDoc { per_doc: RANDOM_PER_DOC };
            }
            AblationName::NoKb => config.force_decision = ForceDecision::AlwaysNoRet,
        }
        Self { name, config }
    }

    pub fn all(base: &PipelineConfig) -> Vec<Self> {
        AblationName::ALL.iter().map(|&n| Self::new(n, base)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub report: EvalReport,
    pub failures: Vec<VariantFailure>,
    #[serde(skip)]
    pub traces: Vec<PipelineTrace>,
}

/// Run the pipeline on `samples` and score it.
pub fn run_and_evaluate(
    engine: &Engine,
    samples: &[QuerySample],
    config: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<VariantOutcome, EvalError> {
    engine.check(config)?;
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in samples.iter().zip(engine.run_batch(samples, config, false)) {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => failures.push(VariantFailure { sample_id: s.id.clone(), error: e.to_string() }),
        }
    }
    let report = evaluate(samples, &traces, opts)?;
    Ok(VariantOutcome { report, failures, traces })
}

/// One report per variant. A variant whose provider is missing is a
/// configuration error for the whole run.
pub fn run_ablation(
    engine: &Engine,
    samples: &[QuerySample],
    variants: &[AblationVariant],
    opts: &EvalOptions,
) -> Result<BTreeMap<AblationName, VariantOutcome>, EvalError> {
    for v in variants {
        engine.check(&v.config).map_err(|e| match e {
            EngineError::Config(m) => EngineError::Config(format!("variant {}: {m}", v.name.as_str())),
            other => other,
        })?;
    }
    variants.iter().map(|v| Ok((v.name, run_and_evaluate(engine, samples, &v.config, opts)?))).collect()
}

/// `variant,dataset,split,value,num_samples` for every variant.
pub fn ablation_csv(outcomes: &BTreeMap<AblationName, VariantOutcome>) -> String {
    let mut out = String::from("variant,dataset,split,value,num_samples\n");
    for (name, o) in outcomes {
        for (ds, d) in &o.report.datasets {
            for s in &d.splits {
                out.push_str(&format!(
                    "{},{},{},{:.4},{}\n",
                    name.as_str(),
                    crate::eval::report::csv_field(ds),
                    s.split,
                    s.value,
                    s.num_samples
                ));
            }
        }
    }
    out
}
