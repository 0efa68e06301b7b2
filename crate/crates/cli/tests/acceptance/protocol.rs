//! Hand-authored knowledge base, samples and script; every scenario has a
//! hand-derived expectation and the full traces are pinned by a golden file.

use reflectiva::backend::{CallKind, MatchRule, ScriptFile, ScriptedResponse};
use reflectiva::engine::{PipelineConfig, Rerank};
use reflectiva::eval::{AblationName, AblationVariant};
use reflectiva::io::to_jsonl;
use reflectiva::kb::{write_kb, Document, EmbeddingStorage, Section};
use reflectiva::sample::Split;
use reflectiva::{Engine, KnowledgeBase, MockBackend, PipelineTrace, QuerySample, ReflectiveToken};

use crate::common::{cli_ok, golden};
use crate::{ensure, Outcome};

pub const DIM: usize = 8;
pub const PRUNUS_PASSAGE: &str = "Prunus laurocerasus is an evergreen shrub or small to medium-sized tree, growing to 5 to 15 metres (16 to 49ft) tall, rarely to 18 metres (59ft), with a trunk up to 60cm broad. The leaves are dark green, leathery, shiny, with a finely serrated margin. The leaves can have the scent of almonds when crushed. The flower buds appear in early spring and open in early summer in erect 7 to 15cm racemes of 40 flowers, each flower 1cm across, with five creamy-white petals and numerous yellowish stamens with a sweet smell.";

const REL: (f64, f64) = (-0.05, -3.0);
const WEAK_REL: (f64, f64) = (-0.2, -1.8);
const RET: (f64, f64) = (-0.1, -2.4);

/// (id, title, sections)
type DocSpec = (&'static str, &'static str, &'static [(&'static str, &'static str)]);

const DOCS: [DocSpec; 8] = [
    (
        "prunus",
        "Prunus laurocerasus",
        &[
            ("Description", PRUNUS_PASSAGE),
            ("Cultivation", "Cherry laurel is widely planted as a hedge in temperate regions."),
            ("Toxicity", "The seeds and leaves of the cherry laurel contain cyanogenic glycosides."),
        ],
    ),
    (
        "eiffel",
        "Eiffel Tower",
        &[
            ("Description", "The Eiffel Tower is a wrought-iron lattice tower in Paris."),
            ("Height", "The tower is 330 metres tall."),
            ("History", "It was built for the 1889 World's Fair."),
        ],
    ),
    (
        "panda",
        "Giant panda",
        &[
            ("Diet", "The giant panda feeds almost entirely on bamboo."),
            ("Range", "Giant pandas live in mountain ranges in central China."),
            ("Conservation", "The species is listed as vulnerable."),
        ],
    ),
    (
        "nile",
        "Nile",
        &[("Course", "The Nile flows north into the Mediterranean Sea."), ("Length", "The Nile is about 6650 km long.")],
    ),
    ("montblanc", "Mont Blanc", &[("Elevation", "Mont Blanc is 4806 metres high.")]),
    (
        "colosseum",
        "Colosseum",
        &[
            ("Construction", "Construction of the Colosseum began in 72 AD."),
            ("Capacity", "The Colosseum could hold between 50000 and 80000 spectators."),
        ],
    ),
    (
        "baobab",
        "Adansonia digitata",
        &[("Description", "Adansonia digitata can grow to 25 metres tall."), ("Fruit", "The fruit pulp is rich in vitamin C.")],
    ),
    (
        "monarch",
        "Monarch butterfly",
        &[("Migration", "Monarchs migrate up to 4800 km to Mexico."), ("Wingspan", "The wingspan is 8.9 to 10.2 cm.")],
    ),
];

#[derive(Clone, Copy, PartialEq)]
pub enum Mode {
    Variant(AblationName),
    BuiltIn(usize),
    Oracle,
}

pub struct Case {
    pub id: &'static str,
    pub question: &'static str,
    pub gold: Option<usize>,
    /// Second-nearest document for the query embedding.
    pub near: usize,
    pub decision: ReflectiveToken,
    /// Scripted judgments other than the default `<NOREL>`: (doc, section, logp_rel, logp_norel).
    pub judged: &'static [(usize, usize, f64, f64)],
    /// Answer when the given passage is in the context.
    pub context_answer: Option<(usize, usize, &'static str)>,
    pub direct_answer: &'static str,
    pub mode: Mode,
    pub want_answer: &'static str,
    /// `None` where the selection is seeded-random.
    pub want_selected: Option<&'static [(usize, usize)]>,
    pub want_fallback: bool,
}

const NORET: ReflectiveToken = ReflectiveToken::NoRet;
const RETT: ReflectiveToken = ReflectiveToken::Ret;

pub const CASES: [Case; 20] = [
    Case { id: "s01", question: "What color is the car?", gold: None, near: 3, decision: NORET, judged: &[], context_answer: None, direct_answer: "Black", mode: Mode::Variant(AblationName::Full), want_answer: "Black", want_selected: Some(&[]), want_fallback: false },
    Case { id: "s02", question: "How big can this plant become?", gold: Some(0), near: 6, decision: RETT, judged: &[(0, 0, REL.0, REL.1)], context_answer: Some((0, 0, "16 to 49ft")), direct_answer: "About 10 metres", mode: Mode::Variant(AblationName::Full), want_answer: "16 to 49ft", want_selected: Some(&[(0, 0)]), want_fallback: false },
    Case { id: "s03", question: "How tall is this tower?", gold: Some(1), near: 5, decision: RETT, judged: &[(1, 0, REL.0, REL.1), (1, 1, REL.0, REL.1)], context_answer: Some((1, 1, "330 metres")), direct_answer: "300 metres", mode: Mode::Variant(AblationName::Full), want_answer: "330 metres", want_selected: Some(&[(1, 0), (1, 1)]), want_fallback: false },
    Case { id: "s04", question: "What does this animal eat?", gold: Some(2), near: 7, decision: RETT, judged: &[(2, 0, REL.0, REL.1)], context_answer: Some((2, 0, "Bamboo")), direct_answer: "Leaves", mode: Mode::Variant(AblationName::Full), want_answer: "Bamboo", want_selected: Some(&[(2, 0)]), want_fallback: false },
    Case { id: "s05", question: "How long is this river?", gold: Some(3), near: 4, decision: RETT, judged: &[(3, 1, REL.0, REL.1), (4, 0, WEAK_REL.0, WEAK_REL.1)], context_answer: Some((3, 1, "6650 km")), direct_answer: "Very long", mode: Mode::Variant(AblationName::Full), want_answer: "6650 km", want_selected: Some(&[(3, 1), (4, 0)]), want_fallback: false },
    Case { id: "s06", question: "How many spectators could this building hold?", gold: Some(5), near: 1, decision: RETT, judged: &[(5, 1, REL.0, REL.1)], context_answer: Some((5, 1, "50000 to 80000")), direct_answer: "Thousands", mode: Mode::Variant(AblationName::Full), want_answer: "50000 to 80000", want_selected: Some(&[(5, 1)]), want_fallback: false },
    // Nothing judged relevant: the best-scoring passage is used.
    Case { id: "s07", question: "Which vitamin is this fruit rich in?", gold: Some(6), near: 0, decision: RETT, judged: &[(6, 1, -1.2, -0.4)], context_answer: Some((6, 1, "Vitamin C")), direct_answer: "Vitamin A", mode: Mode::Variant(AblationName::Full), want_answer: "Vitamin C", want_selected: Some(&[(6, 1)]), want_fallback: true },
    // All scores tie: the first candidate wins.
    Case { id: "s08", question: "How far does this insect migrate?", gold: Some(7), near: 2, decision: RETT, judged: &[], context_answer: Some((7, 0, "4800 km")), direct_answer: "Far", mode: Mode::Variant(AblationName::Full), want_answer: "4800 km", want_selected: Some(&[(7, 0)]), want_fallback: true },
    Case { id: "s09", question: "How high is this mountain?", gold: Some(4), near: 3, decision: RETT, judged: &[(4, 0, REL.0, REL.1), (3, 1, WEAK_REL.0, WEAK_REL.1)], context_answer: Some((4, 0, "4806 metres")), direct_answer: "Very high", mode: Mode::BuiltIn(1), want_answer: "4806 metres", want_selected: Some(&[(4, 0)]), want_fallback: false },
    Case { id: "s10", question: "When was this tower built?", gold: Some(1), near: 5, decision: RETT, judged: &[(1, 2, REL.0, REL.1), (5, 0, -1.0, -0.5)], context_answer: Some((1, 2, "1889")), direct_answer: "1900", mode: Mode::BuiltIn(2), want_answer: "1889", want_selected: Some(&[(1, 2), (5, 0)]), want_fallback: false },
    Case { id: "s11", question: "Is this plant poisonous?", gold: Some(0), near: 6, decision: NORET, judged: &[(0, 2, REL.0, REL.1)], context_answer: Some((0, 2, "Yes")), direct_answer: "No", mode: Mode::Oracle, want_answer: "Yes", want_selected: Some(&[(0, 2)]), want_fallback: false },
    Case { id: "s12", question: "Where does this animal live?", gold: Some(2), near: 7, decision: RETT, judged: &[(2, 1, REL.0, REL.1)], context_answer: Some((2, 1, "Central China")), direct_answer: "Asia", mode: Mode::Oracle, want_answer: "Central China", want_selected: Some(&[(2, 1)]), want_fallback: false },
    Case { id: "s13", question: "What color is the sky in this image?", gold: None, near: 7, decision: NORET, judged: &[], context_answer: None, direct_answer: "Blue", mode: Mode::Variant(AblationName::AlwaysRet), want_answer: "Blue", want_selected: Some(&[(6, 0)]), want_fallback: true },
    Case { id: "s14", question: "Into which sea does this river flow?", gold: Some(3), near: 5, decision: RETT, judged: &[(3, 0, REL.0, REL.1)], context_answer: Some((3, 0, "Mediterranean Sea")), direct_answer: "Red Sea", mode: Mode::Variant(AblationName::AlwaysRet), want_answer: "Mediterranean Sea", want_selected: Some(&[(3, 0)]), want_fallback: false },
    // Lexical overlap: "species" is the only shared token; ties keep candidate order.
    Case { id: "s15", question: "Which conservation status does this species have?", gold: Some(2), near: 7, decision: RETT, judged: &[], context_answer: Some((2, 2, "Vulnerable")), direct_answer: "Endangered", mode: Mode::Variant(AblationName::ExternalScorerPassages), want_answer: "Vulnerable", want_selected: Some(&[(2, 2), (2, 0)]), want_fallback: false },
    Case { id: "s16", question: "When did construction of this amphitheatre begin?", gold: Some(5), near: 1, decision: RETT, judged: &[], context_answer: Some((5, 0, "72 AD")), direct_answer: "80 AD", mode: Mode::Variant(AblationName::ExternalScorerPassages), want_answer: "72 AD", want_selected: Some(&[(5, 0), (5, 1)]), want_fallback: false },
    Case { id: "s17", question: "What do the crushed leaves smell like?", gold: Some(0), near: 6, decision: RETT, judged: &[], context_answer: Some((0, 0, "Almonds")), direct_answer: "Nothing", mode: Mode::Variant(AblationName::RandomPassagesNoRel), want_answer: "", want_selected: None, want_fallback: false },
    Case { id: "s18", question: "What material is this tower made of?", gold: Some(1), near: 5, decision: RETT, judged: &[], context_answer: Some((1, 0, "Wrought iron")), direct_answer: "Steel", mode: Mode::Variant(AblationName::RandomPassagesNoRel), want_answer: "", want_selected: None, want_fallback: false },
    Case { id: "s19", question: "How tall does this shrub grow?", gold: Some(0), near: 6, decision: RETT, judged: &[(0, 0, REL.0, REL.1)], context_answer: Some((0, 0, "16 to 49ft")), direct_answer: "2 metres", mode: Mode::Variant(AblationName::NoKb), want_answer: "2 metres", want_selected: Some(&[]), want_fallback: false },
    Case { id: "s20", question: "What color is the bus?", gold: None, near: 4, decision: NORET, judged: &[], context_answer: None, direct_answer: "Yellow", mode: Mode::Variant(AblationName::NoKb), want_answer: "Yellow", want_selected: Some(&[]), want_fallback: false },
];

pub fn base_config() -> PipelineConfig {
    PipelineConfig { top_k_docs: 2, ..PipelineConfig::default() }
}

pub fn config_for(mode: Mode) -> PipelineConfig {
    match mode {
        Mode::Variant(name) => AblationVariant::new(name, &base_config()).config,
        Mode::BuiltIn(k_p) => PipelineConfig { rerank: Rerank::BuiltIn { k_p }, ..base_config() },
        Mode::Oracle => base_config(),
    }
}

fn axis(i: usize) -> Vec<f32> {
    (0..DIM).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

pub fn knowledge_base() -> KnowledgeBase {
    let docs = DOCS
        .iter()
        .enumerate()
        .map(|(i, (id, title, sections))| Document {
            id: id.to_string(),
            title: title.to_string(),
            summary: String::new(),
            sections: sections.iter().map(|(t, x)| Section { title: t.to_string(), text: x.to_string() }).collect(),
            image_embedding: Some(axis(i)),
        })
        .collect();
    KnowledgeBase::from_documents(docs, DIM).expect("valid knowledge base")
}

pub fn text(doc: usize, sec: usize) -> &'static str {
    DOCS[doc].2[sec].1
}

pub fn doc_id(doc: usize) -> &'static str {
    DOCS[doc].0
}

pub fn sample(c: &Case) -> QuerySample {
    // Nearest document: the gold one (or the near one's neighbour), then `near`.
    let first = c.gold.unwrap_or((c.near + DOCS.len() - 1) % DOCS.len());
    let norm = (1.0f32 + 0.25).sqrt();
    let emb: Vec<f32> = (0..DIM)
        .map(|j| {
            if j == first {
                1.0 / norm
            } else if j == c.near {
                0.5 / norm
            } else {
                0.0
            }
        })
        .collect();
    QuerySample {
        id: c.id.into(),
        question: c.question.into(),
        image_ref: format!("images/{}.jpg", c.id),
        image_embedding: Some(emb),
        gold_answers: vec![c.want_answer.to_string()],
        gold_doc_id: c.gold.map(|g| doc_id(g).to_string()),
        dataset: "protocol".into(),
        split: Split::Test,
        category: None,
        captions: vec![],
    }
}

pub fn script() -> ScriptFile {
    let mut s = ScriptFile::default();
    for c in &CASES {
        let q = || MatchRule::question(c.question);
        let (ret, noret) = if c.decision == RETT { RET } else { (RET.1, RET.0) };
        s.push(q().stage(CallKind::Decision), ScriptedResponse::tokens(RETT, ret, NORET, noret));
        for &(d, sec, lr, ln) in c.judged {
            s.push(
                q().stage(CallKind::Judgment).passage_contains(text(d, sec)),
                ScriptedResponse::tokens(ReflectiveToken::Rel, lr, ReflectiveToken::NoRel, ln),
            );
        }
        if let Some((d, sec, a)) = c.context_answer {
            s.push(q().stage(CallKind::Answer).passage_contains(text(d, sec)), ScriptedResponse::text(a));
        }
        s.push(q().stage(CallKind::Answer), ScriptedResponse::text(c.direct_answer));
    }
    s.push(
        MatchRule::default().stage(CallKind::Judgment),
        ScriptedResponse::tokens(ReflectiveToken::Rel, -2.5, ReflectiveToken::NoRel, -0.09),
    );
    s
}

pub fn run_case(engine: &Engine, c: &Case) -> Result<PipelineTrace, String> {
    let s = sample(c);
    let config = config_for(c.mode);
    let r = match c.mode {
        Mode::Oracle => engine.run_oracle(&s, doc_id(c.gold.expect("oracle case has gold")), &config),
        _ => engine.run_pipeline(&s, &config),
    };
    r.map_err(|e| format!("{}: {e}", c.id))
}

fn check_case(c: &Case, t: &PipelineTrace, kb: &KnowledgeBase) -> Result<(), String> {
    let id = c.id;
    let config = config_for(c.mode);
    let want_token = match config.force_decision {
        reflectiva::engine::ForceDecision::AlwaysRet => RETT,
        reflectiva::engine::ForceDecision::AlwaysNoRet => NORET,
        _ if c.mode == Mode::Oracle => RETT,
        _ => c.decision,
    };
    ensure!(t.decision.model_token == c.decision, "{id}: model token {}", t.decision.model_token);
    ensure!(t.decision.token == want_token, "{id}: effective token {}", t.decision.token);
    ensure!(t.decision.forced == (want_token != c.decision), "{id}: forced flag {}", t.decision.forced);
    ensure!(t.fallback == c.want_fallback, "{id}: fallback {}", t.fallback);
    let selected: Vec<(String, usize)> = t.selected.iter().map(|p| (p.doc_id.clone(), p.section_index)).collect();
    if want_token == NORET {
        ensure!(t.hits.is_empty() && t.candidates.is_empty() && t.judgments.is_empty(), "{id}: NORET trace retrieved");
    } else if c.mode == Mode::Oracle {
        let gold = doc_id(c.gold.unwrap());
        ensure!(t.hits.is_empty(), "{id}: oracle mode searched");
        ensure!(t.candidates == kb.passages_of(gold).unwrap(), "{id}: oracle candidates");
    } else {
        let first = c.gold.unwrap_or((c.near + DOCS.len() - 1) % DOCS.len());
        let hit_ids: Vec<&str> = t.hits.iter().map(|h| h.doc_id.as_str()).collect();
        ensure!(hit_ids == [doc_id(first), doc_id(c.near)], "{id}: hits {hit_ids:?}");
        let n = DOCS[first].2.len() + DOCS[c.near].2.len();
        ensure!(t.candidates.len() == n, "{id}: {} candidates, want {n}", t.candidates.len());
    }
    match c.want_selected {
        Some(want) => {
            let want: Vec<(String, usize)> = want.iter().map(|&(d, s)| (doc_id(d).to_string(), s)).collect();
            ensure!(selected == want, "{id}: selected {selected:?}, want {want:?}");
            ensure!(t.answer == c.want_answer, "{id}: answer {:?}, want {:?}", t.answer, c.want_answer);
        }
        None => {
            // Random selection: two passages (or all) from each retrieved document, section order.
            for h in &t.hits {
                let of_doc: Vec<usize> = t.selected.iter().filter(|p| p.doc_id == h.doc_id).map(|p| p.section_index).collect();
                let n = kb.passages_of(&h.doc_id).unwrap().len().min(2);
                ensure!(of_doc.len() == n, "{id}: {} passages of {}", of_doc.len(), h.doc_id);
                ensure!(of_doc.windows(2).all(|w| w[0] < w[1]), "{id}: random passages out of order");
            }
            ensure!(t.judgments.is_empty(), "{id}: random selection judged passages");
            let (d, s, a) = c.context_answer.unwrap();
            let want = if selected.contains(&(doc_id(d).to_string(), s)) { a } else { c.direct_answer };
            ensure!(t.answer == want, "{id}: answer {:?}, want {want:?}", t.answer);
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let kb = knowledge_base();
    let index = reflectiva::index::build_index(&kb, reflectiva::RetrievalMode::Visual, None).map_err(|e| e.to_string())?;
    let backend = MockBackend::from_script(script());
    let reranker = reflectiva::engine::SimilarityReranker(reflectiva::similarity::LexicalOverlapScorer);
    let scorer = reflectiva::similarity::LexicalOverlapScorer;
    let engine = Engine::new(&backend).with_knowledge(&kb, &index).with_reranker(&reranker).with_scorer(&scorer);

    let mut traces = Vec::new();
    for c in &CASES {
        let t = run_case(&engine, c)?;
        check_case(c, &t, &kb)?;
        traces.push(t);
    }
    let again: Vec<PipelineTrace> = CASES.iter().map(|c| run_case(&engine, c)).collect::<Result<_, _>>()?;
    ensure!(again == traces, "second run produced different traces");
    let bytes = to_jsonl(&traces).map_err(|e| e.to_string())?;
    golden("protocol_traces.jsonl", &bytes)?;

    // The CLI answers the two listing questions the same way.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_kb(&kb, &dir.path().join("kb.jsonl"), EmbeddingStorage::Inline).map_err(|e| e.to_string())?;
    let samples: Vec<QuerySample> = CASES.iter().map(sample).collect();
    std::fs::write(dir.path().join("samples.jsonl"), to_jsonl(&samples).unwrap()).unwrap();
    std::fs::write(dir.path().join("script.json"), serde_json::to_vec_pretty(&script()).unwrap()).unwrap();
    let args = ["--kb", "kb.jsonl", "--dataset", "samples.jsonl", "--script", "script.json", "--out", "out"];
    for (id, want) in [("s01", "Black"), ("s02", "16 to 49ft")] {
        let mut a = args.to_vec();
        a.extend(["answer", "--id", id]);
        let r = cli_ok(dir.path(), &a)?;
        ensure!(r.stdout.trim() == want, "cli answer for {id}: {:?}", r.stdout.trim());
        ensure!(dir.path().join("out/trace.json").exists(), "cli wrote no trace");
    }
    Ok(format!("{} scenarios match hand-derived expectations and golden traces; cli answers \"Black\" and \"16 to 49ft\"", CASES.len()))
}
