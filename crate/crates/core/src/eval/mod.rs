//! Metrics, reports, token accuracy and ablations.

pub mod ablation;
pub mod judge;
pub mod metrics;
pub mod report;
pub mod tokens;

pub use ablation::{ablation_csv, run_ablation, run_and_evaluate, AblationName, AblationVariant, VariantOutcome};
pub use judge::{AnswerJudge, ExactMatchJudge, JudgeError, RelaxedJudge};
pub use metrics::{
    infoseek_aggregate, relaxed_accuracy, round1, token_f1_em, vqa_accuracy, MetricName, MetricScore, DEFAULT_REL_TOL,
};
pub use report::{evaluate, DatasetFamily, EvalError, EvalOptions, EvalReport, TraceStats};
pub use tokens::{token_accuracy, Difficulty, ProbePassage, TokenAccuracyReport, TokenExpectation, TokenObservation};
pub use crate::text::normalize_answer;
