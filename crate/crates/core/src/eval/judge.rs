//! Pluggable answer judging for protocols that go beyond string matching.

use crate::eval::metrics::{relaxed_accuracy, vqa_accuracy};
use crate::sample::QuerySample;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("judge service: {0}")]
    Service(String),
    #[error("judge returned score {0} outside 0..=100")]
    OutOfRange(f64),
}

pub trait AnswerJudge: Send + Sync {
    /// Score in `[0, 1]`.
    fn judge(&self, sample: &QuerySample, prediction: &str) -> Result<f64, JudgeError>;

    fn name(&self) -> &str;
}

/// Normalized exact match against any gold answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatchJudge;

impl AnswerJudge for ExactMatchJudge {
    fn judge(&self, sample: &QuerySample, prediction: &str) -> Result<f64, JudgeError> {
        Ok(vqa_accuracy(prediction, &sample.gold_answers))
    }

    fn name(&self) -> &str {
        "exact_match"
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RelaxedJudge {
    pub rel_tol: f64,
}

impl AnswerJudge for RelaxedJudge {
    fn judge(&self, sample: &QuerySample, prediction: &str) -> Result<f64, JudgeError> {
        Ok(relaxed_accuracy(prediction, &sample.gold_answers, self.rel_tol))
    }

    fn name(&self) -> &str {
        "relaxed"
    }
}

/// Prompt for an LLM judge scoring answer alignment from 0 to 100. The
/// placeholders are filled by [`render_judge_prompt`].
pub const JUDGE_PROMPT_TEMPLATE: &str = "You are trying to evaluate the alignment between a predicted answer and a ground-truth answer for a given question-image pair. To do this, consider the context provided by the question itself and the caption of the query image.
# Question: {question}
# Image Caption: {caption}
# Ground-truth Answer: {ground-truth answer}
# Predicted Answer: {predicted answer}
You have to determine the alignment between the predicted answer and the ground-truth on a scale from 0 to 100, where 0 indicates no alignment and 100 indicates perfect alignment. Your response should be in JSON format, outputting a list where each element is a dictionary representing a candidate with:
\"score\": a numeric value between 0 and 100 indicating the alignment level,
\"reason\": a string explaining the rationale for the given score.";

pub fn render_judge_prompt(question: &str, caption: &str, ground_truth: &str, predicted: &str) -> String {
    JUDGE_PROMPT_TEMPLATE
        .replace("{question}", question)
        .replace("{caption}", caption)
        .replace("{ground-truth answer}", ground_truth)
        .replace("{predicted answer}", predicted)
}
