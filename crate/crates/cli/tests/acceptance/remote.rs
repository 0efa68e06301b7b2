//! Wire-protocol round trips against a local stub server, then one injected
//! fault per contract clause; every fault must surface as its typed error.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use reflectiva::backend::{check_vocabulary, BackendError, GenerationRequest, GenerationResult, SegmentKind};
use reflectiva::engine::{apply_external_reranker, EngineError, PipelineConfig, Rerank, RerankError, Reranker};
use reflectiva::eval::{AnswerJudge, JudgeError};
use reflectiva::forge::PassageAnnotator;
use reflectiva::remote::stub::StubServer;
use reflectiva::remote::{RemoteAnnotator, RemoteBackend, RemoteConfig, RemoteEmbedder, RemoteJudge, RemoteReranker};
use reflectiva::index::TextEmbedder;
use reflectiva::{DenseIndex, Engine, KnowledgeBase, PipelineTrace, RetrievalMode};
use serde_json::{json, Value};

use crate::protocol::{self, CASES};
use crate::{ensure, Outcome};

fn config(url: &str) -> RemoteConfig {
    RemoteConfig { endpoint: url.into(), timeout_secs: 5.0, retries: 2, backoff_ms: 1, ..RemoteConfig::default() }
}

#[derive(Clone, Copy, PartialEq)]
enum Step {
    Decision,
    Judgment,
    Answer,
}

fn step(req: &GenerationRequest) -> Step {
    match &req.allowed_tokens {
        Some(t) if t.iter().any(|t| t == "<RET>") => Step::Decision,
        Some(_) => Step::Judgment,
        None => Step::Answer,
    }
}

fn passages(req: &GenerationRequest) -> String {
    req.segments.iter().filter(|s| s.kind == SegmentKind::PassageBlock).map(|s| s.payload.as_str()).collect()
}

fn step_result(tok: &str, cands: &[(&str, f64)]) -> GenerationResult {
    let map: BTreeMap<String, f64> = cands.iter().map(|(t, p)| (t.to_string(), p.ln())).collect();
    GenerationResult { tokens: vec![tok.into()], chosen_logprobs: vec![map[tok]], candidate_logprobs: vec![map] }
}

/// A small well-behaved model: always retrieves, finds the height passage
/// relevant, and answers from it.
fn honest(req: &GenerationRequest) -> GenerationResult {
    match step(req) {
        Step::Decision => step_result("<RET>", &[("<RET>", 0.9), ("<NORET>", 0.1)]),
        Step::Judgment if passages(req).contains("49ft") => step_result("<REL>", &[("<REL>", 0.95), ("<NOREL>", 0.05)]),
        Step::Judgment => step_result("<NOREL>", &[("<REL>", 0.2), ("<NOREL>", 0.8)]),
        Step::Answer => {
            let words: Vec<String> = if passages(req).contains("49ft") { vec!["16", " to", " 49ft"] } else { vec!["I", " don't", " know"] }
                .into_iter()
                .map(String::from)
                .collect();
            GenerationResult { chosen_logprobs: vec![-0.1; words.len()], tokens: words, candidate_logprobs: vec![] }
        }
    }
}

type Tamper = fn(Step, GenerationResult) -> Option<(u16, String)>;

/// Serve `/v1/generate` with the honest model, letting `tamper` replace replies.
fn generate_server(tamper: Tamper, log: Arc<Mutex<Vec<Value>>>) -> StubServer {
    StubServer::start(move |path, body| {
        if path != "/v1/generate" {
            return (404, "not found".into());
        }
        let req: GenerationRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return (400, e.to_string()),
        };
        log.lock().unwrap().push(serde_json::from_str(body).unwrap());
        let honest = honest(&req);
        tamper(step(&req), honest.clone()).unwrap_or_else(|| (200, serde_json::to_string(&honest).unwrap()))
    })
    .expect("start stub server")
}

struct World {
    kb: KnowledgeBase,
    index: DenseIndex,
}

fn world() -> Result<World, String> {
    let kb = protocol::knowledge_base();
    let index = reflectiva::index::build_index(&kb, RetrievalMode::Visual, None).map_err(|e| e.to_string())?;
    Ok(World { kb, index })
}

fn run_s02(w: &World, backend: &RemoteBackend, reranker: Option<&dyn Reranker>, config: &PipelineConfig) -> Result<PipelineTrace, EngineError> {
    let mut engine = Engine::new(backend).with_knowledge(&w.kb, &w.index);
    if let Some(r) = reranker {
        engine = engine.with_reranker(r);
    }
    engine.run_pipeline(&protocol::sample(&CASES[1]), config)
}

fn ok_json(v: Value) -> (u16, String) {
    (200, v.to_string())
}

fn round_trips(w: &World) -> Result<usize, String> {
    let log = Arc::new(Mutex::new(Vec::new()));
    let server = generate_server(|_, _| None, log.clone());
    let backend = RemoteBackend::new(config(server.url()));
    check_vocabulary(&backend).map_err(|e| e.to_string())?;
    let t = run_s02(w, &backend, None, &protocol::base_config()).map_err(|e| e.to_string())?;
    ensure!(t.answer == "16 to 49ft", "remote answer {:?}", t.answer);
    let sel: Vec<(&str, usize)> = t.selected.iter().map(|p| (p.doc_id.as_str(), p.section_index)).collect();
    ensure!(sel == [("prunus", 0)], "remote selection {sel:?}");
    ensure!(!t.fallback && t.judgments.len() == t.candidates.len(), "remote judgments incomplete");
    ensure!((t.decision.logp_ret - 0.9f64.ln()).abs() < 1e-12, "decision log-prob lost on the wire");
    // One decision, one judgment per candidate, one answer; fields on the wire as specified.
    let log = log.lock().unwrap();
    ensure!(log.len() == 2 + t.candidates.len(), "{} generate calls", log.len());
    ensure!(log[0]["max_tokens"] == 1 && log[0]["allowed_tokens"] == json!(["<RET>", "<NORET>"]), "decision request {}", log[0]);
    ensure!(log[1]["allowed_tokens"] == json!(["<REL>", "<NOREL>"]), "judgment request {}", log[1]);
    ensure!(log.last().unwrap()["allowed_tokens"].is_null(), "answer request constrained");
    ensure!(log[0]["segments"][0]["kind"].is_string(), "segments not serialized");
    drop(log);

    let rerank = StubServer::start(|path, body| {
        let v: Value = serde_json::from_str(body).unwrap();
        let n = v["passages"].as_array().map_or(0, Vec::len);
        match path {
            "/v1/rerank" if v["question"].is_string() => ok_json(json!({ "order": (0..n).rev().collect::<Vec<_>>() })),
            _ => (404, String::new()),
        }
    })
    .map_err(|e| e.to_string())?;
    let cands = w.kb.passages_of("prunus").map_err(|e| e.to_string())?;
    let got = apply_external_reranker(&RemoteReranker::new(config(rerank.url())), "q", &cands).map_err(|e| e.to_string())?;
    let mut want = cands.clone();
    want.reverse();
    ensure!(got == want, "remote rerank order");
    let reranker = RemoteReranker::new(config(rerank.url()));
    let ext = PipelineConfig { rerank: Rerank::External { k_p: 2 }, ..protocol::base_config() };
    let t = run_s02(w, &backend, Some(&reranker), &ext).map_err(|e| e.to_string())?;
    ensure!(t.judgments.len() == 2, "external k_p=2 judged {} passages", t.judgments.len());

    let services = StubServer::start(|path, body| {
        let v: Value = serde_json::from_str(body).unwrap();
        match path {
            "/v1/judge" => {
                let want = reflectiva::eval::judge::render_judge_prompt("How big can this plant become?", "a hedge", "16 to 49ft", "about 5 metres");
                let score = if v["prompt"] == want.as_str() { 80 } else { 0 };
                ok_json(json!([{ "score": score, "reason": "close" }]))
            }
            "/v1/embed" => ok_json(json!({ "embedding": [v["text"].as_str().unwrap().len() as f32, 1.0] })),
            "/v1/annotate" => {
                let ans = v["answers"][0].as_str().unwrap_or("~");
                ok_json(json!({ "relevant": v["passage"].as_str().unwrap().contains(ans) }))
            }
            _ => (404, String::new()),
        }
    })
    .map_err(|e| e.to_string())?;
    let mut s = protocol::sample(&CASES[1]);
    s.captions = vec!["a hedge".into()];
    let score = RemoteJudge::new(config(services.url())).judge(&s, "about 5 metres").map_err(|e| e.to_string())?;
    ensure!(score == 0.8, "judge score {score}");
    let emb = RemoteEmbedder::new(config(services.url())).embed("abc").map_err(|e| e.to_string())?;
    ensure!(emb == [3.0, 1.0], "embedding {emb:?}");
    let annotator = RemoteAnnotator::new(config(services.url()));
    ensure!(annotator.is_relevant(&s, &cands[0]).map_err(|e| e.0)?, "annotator missed the answering passage");
    ensure!(!annotator.is_relevant(&s, &cands[1]).map_err(|e| e.0)?, "annotator accepted an unrelated passage");
    Ok(7)
}

type Check = fn(&EngineError) -> bool;

fn violation(e: &EngineError) -> bool {
    matches!(e, EngineError::Backend(BackendError::ProtocolViolation(_)))
}

fn reject(status: u16) -> Option<(u16, String)> {
    Some((status, "injected".into()))
}

fn decision_only(s: Step, r: GenerationResult, f: fn(GenerationResult) -> GenerationResult) -> Option<(u16, String)> {
    (s == Step::Decision).then(|| (200, serde_json::to_string(&f(r)).unwrap()))
}

const GENERATE_FAULTS: [(&str, Tamper, Check); 11] = [
    ("out-of-vocabulary decision token", |s, r| decision_only(s, r, |mut r| { r.tokens[0] = "<REL>".into(); r }), violation),
    ("too many tokens", |s, r| decision_only(s, r, |mut r| { r.tokens.push("<RET>".into()); r.chosen_logprobs.push(-0.1); r.candidate_logprobs.push(r.candidate_logprobs[0].clone()); r }), violation),
    ("missing candidate log-prob", |s, r| decision_only(s, r, |mut r| { r.candidate_logprobs[0].remove("<NORET>"); r }), violation),
    ("candidate mass above 1", |s, r| decision_only(s, r, |mut r| { r.candidate_logprobs[0].insert("<NORET>".into(), (0.5f64).ln()); r }), violation),
    ("positive chosen log-prob", |s, r| decision_only(s, r, |mut r| { r.chosen_logprobs[0] = 0.5; r }), violation),
    ("empty constrained step", |s, r| decision_only(s, r, |_| GenerationResult::default()), violation),
    ("control token in answer", |s, mut r| (s == Step::Answer).then(|| { r.tokens.push("<REL>".into()); r.chosen_logprobs.push(-0.1); (200, serde_json::to_string(&r).unwrap()) }), violation),
    ("judgment with foreign candidate", |s, _| (s == Step::Judgment).then(|| (200, json!({"tokens": ["<REL>"], "chosen_logprobs": [-0.1], "candidates": [{"<REL>": -0.1, "<RET>": -3.0}]}).to_string())), |e| matches!(e, EngineError::AllJudgmentsFailed { .. })),
    ("malformed JSON", |_, _| Some((200, "{\"tokens\": [".into())), violation),
    ("persistent server error", |_, _| reject(500), |e| matches!(e, EngineError::Backend(BackendError::Transport { attempts: 3, .. }))),
    ("rejected request", |_, _| reject(400), |e| matches!(e, EngineError::Backend(BackendError::InvalidRequest(_)))),
];

/// Rerank replies as a function of the number of passages.
type RerankFault = (&'static str, fn(usize) -> Value, Check);

const RERANK_FAULTS: [RerankFault; 3] = [
    ("reranker drops a passage", |n| json!({ "order": (1..n).collect::<Vec<_>>() }), |e| matches!(e, EngineError::Rerank(RerankError::ChangedMultiset))),
    ("reranker duplicates a passage", |n| json!({ "order": std::iter::once(0).chain(0..n - 1).collect::<Vec<_>>() }), |e| matches!(e, EngineError::Rerank(RerankError::ChangedMultiset))),
    ("reranker index out of range", |n| json!({ "order": (0..=n).collect::<Vec<_>>() }), |e| matches!(e, EngineError::Rerank(RerankError::Service(_)))),
];

pub fn run() -> Outcome {
    let w = world()?;
    let trips = round_trips(&w)?;
    let mut surfaced = 0;
    for (name, tamper, check) in GENERATE_FAULTS {
        let server = generate_server(tamper, Arc::default());
        let backend = RemoteBackend::new(config(server.url()));
        match run_s02(&w, &backend, None, &protocol::base_config()) {
            Err(e) if check(&e) => surfaced += 1,
            Err(e) => return Err(format!("{name}: wrong error {e:?}")),
            Ok(t) => return Err(format!("{name}: not surfaced (answer {:?})", t.answer)),
        }
    }
    let gen = generate_server(|_, _| None, Arc::default());
    let backend = RemoteBackend::new(config(gen.url()));
    let ext = PipelineConfig { rerank: Rerank::External { k_p: 3 }, ..protocol::base_config() };
    for (name, reply, check) in RERANK_FAULTS {
        let server = StubServer::start(move |_, body| {
            let v: Value = serde_json::from_str(body).unwrap();
            ok_json(reply(v["passages"].as_array().map_or(0, Vec::len)))
        })
        .map_err(|e| e.to_string())?;
        let reranker = RemoteReranker::new(config(server.url()));
        match run_s02(&w, &backend, Some(&reranker), &ext) {
            Err(e) if check(&e) => surfaced += 1,
            Err(e) => return Err(format!("{name}: wrong error {e:?}")),
            Ok(_) => return Err(format!("{name}: not surfaced")),
        }
    }
    // Service-level faults outside generation.
    let bad = StubServer::start(|path, _| match path {
        "/v1/judge" => ok_json(json!({ "score": 150 })),
        _ => (404, String::new()),
    })
    .map_err(|e| e.to_string())?;
    let r = RemoteJudge::new(config(bad.url())).judge(&protocol::sample(&CASES[1]), "x");
    ensure!(matches!(r, Err(JudgeError::OutOfRange(s)) if s == 150.0), "judge score out of range not surfaced: {r:?}");
    surfaced += 1;
    let partial = RemoteBackend::new(RemoteConfig { control_tokens: Some(vec!["<RET>".into(), "<NORET>".into()]), ..config(gen.url()) });
    ensure!(matches!(check_vocabulary(&partial), Err(BackendError::MissingControlTokens(m)) if m.len() == 4), "missing control tokens not surfaced");
    surfaced += 1;
    let total = GENERATE_FAULTS.len() + RERANK_FAULTS.len() + 2;
    ensure!(surfaced == total, "{surfaced}/{total} faults surfaced");
    Ok(format!("{trips} endpoint round trips; {surfaced}/{total} injected faults surfaced with the expected error"))
}
