//! Seeded synthetic worlds for desk-scale runs: a knowledge base of invented
//! entities, query samples about them, and a mock-backend script describing
//! a plausible reflective model.
//!
//! Every document section states one attribute value ("The height of Voramel
//! is 1834."). A sample asks for one attribute of its gold entity; its image
//! embedding is the entity's embedding plus noise, so retrieval sometimes
//! misses. The scripted model
//!
//! * emits `<RET>` for knowledge questions and `<NORET>` for the
//!   no-retrieval ones, except for a seeded fraction of mistakes;
//! * judges the section holding the answer `<REL>` (again with seeded
//!   mistakes) and everything else `<NOREL>`;
//! * answers correctly iff the answering section is in its context; without
//!   context it knows a fixed fraction of knowledge answers and every
//!   no-retrieval answer.

use std::collections::HashSet;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::backend::{MatchRule, ReflectiveToken, ScriptFile, ScriptedResponse};
use crate::backend::CallKind;
use crate::index::{build_index, DenseIndex, IndexError, RetrievalMode};
use crate::kb::{Document, KbError, KnowledgeBase, Section};
use crate::rng::rng_for;
use crate::sample::{Category, QuerySample, Split};

/// Answer the scripted model gives when it does not know.
pub const UNKNOWN_ANSWER: &str = "unknown";

pub const LOGP_CONFIDENT: f64 = -0.1;
pub const LOGP_UNLIKELY: f64 = -2.4;
pub const LOGP_REL_GOLD: (f64, f64) = (-0.05, -3.0);
pub const LOGP_NOREL_DEFAULT: (f64, f64) = (-2.5, -0.09);

const ATTRIBUTES: [(&str, bool); 10] = [
    ("height", true),
    ("founding year", true),
    ("population", true),
    ("length", true),
    ("architect", false),
    ("color", false),
    ("material", false),
    ("habitat", false),
    ("designer", false),
    ("region", false),
];
const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "yellow", "brown", "gray"];
const SYLLABLES: [&str; 16] = ["vor", "a", "mel", "ti", "ran", "ko", "lis", "ber", "un", "sa", "dor", "e", "qua", "zin", "fo", "ret"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub dim: usize,
    pub num_samples: usize,
    /// Share of samples that need no retrieval.
    pub noret_fraction: f64,
    /// Scale of the noise added to the gold embedding for each query.
    pub query_noise: f32,
    /// Share of documents with a single section.
    pub single_section_fraction: f64,
    /// Share of wrong retrieval decisions.
    pub decision_error: f64,
    /// Share of samples whose answering section is judged `<NOREL>`.
    pub judgment_error: f64,
    /// Share of knowledge samples answered correctly without context.
    pub direct_knowledge: f64,
    /// Share of knowledge samples whose gold answer is phrased differently
    /// from the text (no section contains it verbatim).
    pub paraphrased_answers: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 60,
            dim: 32,
            num_samples: 50,
            noret_fraction: 0.2,
            query_noise: 2.2,
            single_section_fraction: 0.1,
            decision_error: 0.1,
            judgment_error: 0.1,
            direct_knowledge: 0.2,
            paraphrased_answers: 0.0,
            seed: 0,
        }
    }
}

/// Ground truth behind one sample, for oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFact {
    pub sample_id: String,
    pub needs_retrieval: bool,
    /// Token the scripted model emits at the decision step.
    pub scripted_decision: ReflectiveToken,
    /// Text of the section that answers the question (knowledge samples).
    pub answer_section: Option<String>,
    /// Whether the scripted model judges the answering section `<REL>`.
    pub judged_relevant: bool,
    /// Whether the scripted model answers correctly without that section.
    pub knows_directly: bool,
    /// What the model says when the answering section is in context.
    pub context_answer: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub kb: KnowledgeBase,
    pub samples: Vec<QuerySample>,
    pub script: ScriptFile,
    pub facts: Vec<SampleFact>,
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

fn word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn unique<R: RngCore>(seen: &mut HashSet<String>, rng: &mut R, make: impl Fn(&mut R) -> String) -> String {
    loop {
        let v = make(rng);
        if seen.insert(v.clone()) {
            return v;
        }
    }
}

impl SyntheticWorld {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self, SyntheticError> {
        if spec.num_docs == 0 || spec.dim == 0 {
            return Err(SyntheticError::Spec("num_docs and dim must be positive".into()));
        }
        let mut rng = rng_for(spec.seed, "synthetic", "kb");
        let mut names = HashSet::new();
        let mut values = HashSet::new();
        let mut docs = Vec::with_capacity(spec.num_docs);
        for i in 0..spec.num_docs {
            let title = capitalized(&unique(&mut names, &mut rng, |r| {
                let n = r.random_range(2..4);
                word(r, n)
            }));
            let n_sections =
                if rng.random_bool(spec.single_section_fraction.clamp(0.0, 1.0)) { 1 } else { rng.random_range(2..=5) };
            let mut attrs: Vec<usize> = (0..ATTRIBUTES.len()).collect();
            for j in 0..n_sections {
                let k = rng.random_range(j..attrs.len());
                attrs.swap(j, k);
            }
            let sections = attrs[..n_sections]
                .iter()
                .map(|&a| {
                    let (attr, numeric) = ATTRIBUTES[a];
                    let value = unique(&mut values, &mut rng, |r| {
                        if numeric {
                            r.random_range(100..100_000).to_string()
                        } else if attr == "color" {
                            format!("{} {}", word(r, 2), COLORS[r.random_range(0..COLORS.len())])
                        } else {
                            capitalized(&word(r, 3))
                        }
                    });
                    Section {
                        title: capitalized(attr),
                        text: format!("The {attr} of {title} is {value}. This section describes {title}."),
                    }
                })
                .collect();
            docs.push(Document {
                id: format!("ent{i:03}"),
                title: title.clone(),
                summary: format!("{title} is a synthetic entity."),
                sections,
                image_embedding: Some(unit_vector(&mut rng, spec.dim)),
            });
        }

        let mut samples = Vec::with_capacity(spec.num_samples);
        let mut facts = Vec::with_capacity(spec.num_samples);
        let mut script = ScriptFile::default();
        let mut srng = rng_for(spec.seed, "synthetic", "samples");
        for i in 0..spec.num_samples {
            let id = format!("q{i:04}");
            let needs_retrieval = !srng.random_bool(spec.noret_fraction.clamp(0.0, 1.0));
            let decision_wrong = srng.random_bool(spec.decision_error.clamp(0.0, 1.0));
            let scripted_decision = match (needs_retrieval, decision_wrong) {
                (true, false) | (false, true) => ReflectiveToken::Ret,
                _ => ReflectiveToken::NoRet,
            };
            let (sample, fact) = if needs_retrieval {
                let g = srng.random_range(0..docs.len());
                let doc = &docs[g];
                let s = srng.random_range(0..doc.sections.len());
                let text = doc.sections[s].text.clone();
                let attr = doc.sections[s].title.to_lowercase();
                let value = text
                    .strip_prefix(&format!("The {attr} of {} is ", doc.title))
                    .and_then(|r| r.split(". This section").next())
                    .expect("section template")
                    .to_string();
                let paraphrased = srng.random_bool(spec.paraphrased_answers.clamp(0.0, 1.0));
                let gold = if paraphrased { format!("{value} (approx.)") } else { value.clone() };
                let noise = unit_vector(&mut srng, spec.dim);
                let gold_emb = doc.image_embedding.as_ref().expect("generated");
                let q: Vec<f32> = gold_emb.iter().zip(&noise).map(|(a, b)| a + spec.query_noise * b).collect();
                let q = crate::index::normalize(&q).expect("non-degenerate");
                let (dataset, category) = match i % 4 {
                    0 => ("infoseek", Category::UnseenQuestion),
                    1 => ("infoseek", Category::UnseenEntity),
                    2 => ("evqa", Category::SingleHop),
                    _ => ("evqa", if i % 8 == 3 { Category::TwoHop } else { Category::SingleHop }),
                };
                let judged_relevant = !srng.random_bool(spec.judgment_error.clamp(0.0, 1.0));
                let knows_directly = srng.random_bool(spec.direct_knowledge.clamp(0.0, 1.0));
                (
                    QuerySample {
                        id: id.clone(),
                        question: format!("What is the {attr} of the subject in image {id}?"),
                        image_ref: format!("images/{id}.jpg"),
                        image_embedding: Some(q),
                        gold_answers: vec![gold],
                        gold_doc_id: Some(doc.id.clone()),
                        dataset: dataset.into(),
                        split: Split::Train,
                        category: Some(category),
                        captions: vec![format!("a photo related to {}", doc.title)],
                    },
                    SampleFact {
                        sample_id: id.clone(),
                        needs_retrieval,
                        scripted_decision,
                        answer_section: Some(text),
                        judged_relevant,
                        knows_directly,
                        context_answer: value,
                    },
                )
            } else {
                let color = COLORS[srng.random_range(0..COLORS.len())].to_string();
                (
                    QuerySample {
                        id: id.clone(),
                        question: format!("What color is the object in image {id}?"),
                        image_ref: format!("images/{id}.jpg"),
                        image_embedding: Some(unit_vector(&mut srng, spec.dim)),
                        gold_answers: vec![color.clone()],
                        gold_doc_id: None,
                        dataset: "gqa".into(),
                        split: Split::Train,
                        category: None,
                        captions: vec![],
                    },
                    SampleFact {
                        sample_id: id.clone(),
                        needs_retrieval,
                        scripted_decision,
                        answer_section: None,
                        judged_relevant: false,
                        knows_directly: true,
                        context_answer: color,
                    },
                )
            };
            script_sample(&mut script, &sample, &fact);
            samples.push(sample);
            facts.push(fact);
        }
        script.push(
            MatchRule::default().stage(CallKind::Judgment),
            ScriptedResponse::tokens(ReflectiveToken::Rel, LOGP_NOREL_DEFAULT.0, ReflectiveToken::NoRel, LOGP_NOREL_DEFAULT.1),
        );
        let kb = KnowledgeBase::from_documents(docs, spec.dim)?;
        Ok(Self { kb, samples, script, facts })
    }

    pub fn index(&self) -> Result<DenseIndex, IndexError> {
        build_index(&self.kb, RetrievalMode::Visual, None)
    }
}

fn script_sample(script: &mut ScriptFile, s: &QuerySample, f: &SampleFact) {
    let q = || MatchRule::question(s.question.clone());
    let (ret, noret) = match f.scripted_decision {
        ReflectiveToken::Ret => (LOGP_CONFIDENT, LOGP_UNLIKELY),
        _ => (LOGP_UNLIKELY, LOGP_CONFIDENT),
    };
    script.push(
        q().stage(CallKind::Decision),
        ScriptedResponse::tokens(ReflectiveToken::Ret, ret, ReflectiveToken::NoRet, noret),
    );
    if let Some(section) = &f.answer_section {
        if f.judged_relevant {
            script.push(
                q().stage(CallKind::Judgment).passage_contains(section.clone()),
                ScriptedResponse::tokens(ReflectiveToken::Rel, LOGP_REL_GOLD.0, ReflectiveToken::NoRel, LOGP_REL_GOLD.1),
            );
        }
        script.push(q().stage(CallKind::Answer).passage_contains(section.clone()), ScriptedResponse::text(f.context_answer.clone()));
    }
    let direct = if f.knows_directly { f.context_answer.clone() } else { UNKNOWN_ANSWER.to_string() };
    script.push(q().stage(CallKind::Answer), ScriptedResponse::text(direct));
}
