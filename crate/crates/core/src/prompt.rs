//! Prompt construction for every protocol step.
//!
//! Decision and direct-answer prompts follow the single-turn chat layout:
//! system turn, user turn with the image placeholder and question, then the
//! assistant turn. Once retrieval has been chosen the assistant turn carries
//! `<RET>` and a second user turn presents the passages:
//!
//! ```text
//! Consider this paragraph:
//! <paragraph>
//! ...
//! </paragraph>
//! Give a short answer.
//! ```
//!
//! Answer prompts end with the control token the model emitted before the
//! answer (`<NORET>` for direct answers, `<REL>` after relevant passages), so
//! answer generation continues exactly where the reflective step stopped.

use crate::backend::{PromptSegment, ReflectiveToken, SegmentKind};
use crate::kb::Passage;
use crate::sample::QuerySample;

pub const SYSTEM_PROMPT: &str = "You are a helpful language and vision assistant. You are able to understand the visual content that the user provides, and assist the user with a variety of tasks using natural language.";
pub const PASSAGE_INTRO: &str = "Consider this paragraph:";
pub const SHORT_ANSWER: &str = "Give a short answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStage {
    Decision,
    Judgment,
    AnswerWithPassages,
    AnswerDirect,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("{stage:?} prompt takes {expected} passage(s), got {got}")]
    Arity { stage: PromptStage, expected: &'static str, got: usize },
}

fn preamble(sample: &QuerySample) -> Vec<PromptSegment> {
    vec![
        PromptSegment::system(SYSTEM_PROMPT),
        PromptSegment::image(sample.image_ref.clone()),
        PromptSegment::user(sample.question.clone()),
        PromptSegment::assistant_start(),
    ]
}

fn with_passages(sample: &QuerySample, passages: &[Passage]) -> Vec<PromptSegment> {
    let mut out = preamble(sample);
    out.push(PromptSegment::control(ReflectiveToken::Ret));
    out.push(PromptSegment::user(PASSAGE_INTRO));
    out.extend(passages.iter().map(|p| PromptSegment::passage(&p.text)));
    out.push(PromptSegment::user(SHORT_ANSWER));
    out.push(PromptSegment::assistant_start());
    out
}

/// Build the segment list for `stage`. Judgment takes exactly one passage,
/// answer-with-passages at least one, and the other stages none.
pub fn build_prompt(
    stage: PromptStage,
    sample: &QuerySample,
    passages: &[Passage],
) -> Result<Vec<PromptSegment>, PromptError> {
    let arity = |expected| PromptError::Arity { stage, expected, got: passages.len() };
    match stage {
        PromptStage::Decision => {
            if !passages.is_empty() {
                return Err(arity("0"));
            }
            Ok(preamble(sample))
        }
        PromptStage::AnswerDirect => {
            if !passages.is_empty() {
                return Err(arity("0"));
            }
            let mut out = preamble(sample);
            out.push(PromptSegment::control(ReflectiveToken::NoRet));
            Ok(out)
        }
        PromptStage::Judgment => {
            if passages.len() != 1 {
                return Err(arity("exactly 1"));
            }
            Ok(with_passages(sample, passages))
        }
        PromptStage::AnswerWithPassages => {
            if passages.is_empty() {
                return Err(arity("at least 1"));
            }
            let mut out = with_passages(sample, passages);
            out.push(PromptSegment::control(ReflectiveToken::Rel));
            Ok(out)
        }
    }
}

#[derive(PartialEq)]
enum Turn {
    None,
    User,
    Assistant,
}

/// Render segments with the LLaMA-3 chat template. The image placeholder is
/// `<image>`; a server substitutes visual tokens for it.
pub fn render_chat(segments: &[PromptSegment]) -> String {
    let mut out = String::from("<|begin_of_text|>");
    let mut turn = Turn::None;
    let mut turn_has_content = false;
    let open_user = |out: &mut String, turn: &mut Turn, has: &mut bool| {
        if *turn != Turn::User {
            out.push_str("<|start_header_id|>user<|end_header_id|>\n\n");
            *turn = Turn::User;
            *has = false;
        }
    };
    for seg in segments {
        match seg.kind {
            SegmentKind::System => {
                out.push_str("<|start_header_id|>system<|end_header_id|>\n\n");
                out.push_str(&seg.payload);
                out.push_str("<|eot_id|>");
                turn = Turn::None;
            }
            SegmentKind::ImageRef | SegmentKind::UserText | SegmentKind::PassageBlock => {
                open_user(&mut out, &mut turn, &mut turn_has_content);
                if turn_has_content {
                    out.push('\n');
                }
                if seg.kind == SegmentKind::ImageRef {
                    out.push_str("<image>");
                } else {
                    out.push_str(&seg.payload);
                }
                turn_has_content = true;
            }
            SegmentKind::AssistantStart => {
                if turn == Turn::User {
                    out.push_str("<|eot_id|>");
                }
                out.push_str("<|start_header_id|>assistant<|end_header_id|>\n\n");
                turn = Turn::Assistant;
                turn_has_content = false;
            }
            SegmentKind::ControlToken => {
                out.push_str(&seg.payload);
                if turn == Turn::Assistant {
                    out.push_str("\n\n");
                }
            }
        }
    }
    out
}
