use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use reflectiva::backend::{check_vocabulary, GenerativeBackend, MockBackend};
use reflectiva::engine::{Engine, PipelineConfig, PipelineTrace, Rerank, Reranker, SimilarityReranker};
use reflectiva::eval::{
    ablation_csv, evaluate, run_ablation, run_and_evaluate, token_accuracy, AblationVariant, AnswerJudge, EvalOptions,
    TokenExpectation, TokenObservation,
};
use reflectiva::forge::{
    build_stage1, emit_stage2_sequences, mine_stage2, HeuristicAnnotator, PassageAnnotator, Stage2Triplet,
};
use reflectiva::index::{build_index, recall_at_k, HashingEmbedder, TextEmbedder};
use reflectiva::io::{read_jsonl, to_jsonl, write_atomic};
use reflectiva::kb::{load_kb, write_kb, EmbeddingStorage, KnowledgeBase};
use reflectiva::remote::{RemoteAnnotator, RemoteBackend, RemoteEmbedder, RemoteJudge, RemoteReranker};
use reflectiva::similarity::{LexicalOverlapScorer, TextSimilarity};
use reflectiva::synthetic::{SyntheticSpec, SyntheticWorld};
use reflectiva::{DenseIndex, QuerySample, RetrievalMode};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{BackendKind, Cli, CliError, Command};

/// Dimension of the hashing embedder used for textual indexes under the mock backend.
const HASHING_DIM: usize = 256;

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Knowledge base JSONL (overrides --kb).
    pub kb_jsonl: Option<PathBuf>,
    /// Re-write the validated knowledge base to <out>/kb.jsonl.
    #[arg(long)]
    pub write: bool,
    /// Embedding layout when re-writing.
    #[arg(long, value_enum, default_value_t = StorageArg::Inline)]
    pub storage: StorageArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StorageArg {
    Inline,
    Sidecar,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// visual, title or title-summary.
    #[arg(long, default_value = "visual")]
    pub mode: RetrievalMode,
    /// Output file (default <out>/index.<mode>.jsonl).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also report recall@k of the dataset's gold documents at these cut-offs.
    #[arg(long, value_delimiter = ',')]
    pub recall: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AnswerArgs {
    /// Id of the sample in the dataset.
    #[arg(long, conflicts_with = "sample")]
    pub id: Option<String>,
    /// A single sample as a JSON file.
    #[arg(long)]
    pub sample: Option<PathBuf>,
    /// Use every passage of the gold document instead of searching.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Use every passage of the gold document instead of searching.
    #[arg(long)]
    pub oracle: bool,
    /// Also run every ablation variant.
    #[arg(long)]
    pub ablations: bool,
    /// Score answers with the remote judge service.
    #[arg(long)]
    pub remote_judge: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Annotation retries per sample (stage 1).
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepMode {
    Builtin,
    External,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Numbers of retrieved documents.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50])]
    pub ks: Vec<usize>,
    /// Numbers of passages kept after re-ranking.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 10, 20])]
    pub kps: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SweepMode::Builtin)]
    pub mode: SweepMode,
}

#[derive(Debug, Args)]
pub struct TokenAccArgs {
    /// JSONL of token expectations.
    #[arg(long)]
    pub suite: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    pub num_docs: usize,
    #[arg(long, default_value_t = 50)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// JSON file with a full generator spec; the flags above are ignored.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.global)?;
    if let Some(jobs) = cfg.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Ingest(a) => ingest(&cfg, a),
        Command::Index(a) => index(&cfg, a),
        Command::Answer(a) => answer(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Mine(a) => mine(&cfg, a),
        Command::RerankSweep(a) => sweep(&cfg, a),
        Command::TokenAcc(a) => token_acc(&cfg, a),
        Command::Synth(a) => synth(&cfg, a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    write_file(path, &to_jsonl(items).map_err(|e| CliError::runtime(e.to_string()))?)
}

/// Every JSON output carries the seed it was produced with.
#[derive(Serialize)]
struct Seeded<'a, T: Serialize> {
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn write_seeded<T: Serialize>(cfg: &RunConfig, name: &str, body: &T) -> Result<PathBuf, CliError> {
    let path = cfg.output_dir.join(name);
    write_json(&path, &Seeded { seed: cfg.seed, body })?;
    Ok(path)
}

#[derive(Serialize)]
struct Failure {
    sample_id: String,
    error: String,
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    command: &'a str,
    failures: Vec<Failure>,
}

/// Write `failures.json` and turn a non-empty list into exit code 3.
fn finish(cfg: &RunConfig, command: &str, failures: Vec<Failure>, total: usize) -> Result<(), CliError> {
    if failures.is_empty() {
        return Ok(());
    }
    let n = failures.len();
    let path = write_seeded(cfg, "failures.json", &FailureManifest { command, failures })?;
    Err(CliError::partial(format!("{n} of {total} samples failed; see {}", path.display())))
}

fn load_knowledge(cfg: &RunConfig) -> Result<KnowledgeBase, CliError> {
    let path = cfg.require(&cfg.kb_path, "knowledge base", "--kb")?;
    load_kb(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn load_samples(cfg: &RunConfig, kb: Option<&KnowledgeBase>) -> Result<Vec<QuerySample>, CliError> {
    let path = cfg.require(&cfg.dataset_path, "dataset", "--dataset")?;
    let samples: Vec<QuerySample> =
        read_jsonl(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let dim = kb.map(KnowledgeBase::embedding_dim);
    let mut seen = std::collections::HashSet::new();
    for s in &samples {
        s.validate(dim).map_err(|e| CliError::config(format!("{}: sample `{}`: {e}", path.display(), s.id)))?;
        if !seen.insert(s.id.as_str()) {
            return Err(CliError::config(format!("{}: duplicate sample id `{}`", path.display(), s.id)));
        }
    }
    Ok(samples)
}

fn load_index(cfg: &RunConfig, kb: &KnowledgeBase) -> Result<DenseIndex, CliError> {
    match &cfg.index_path {
        Some(_) => {
            let path = cfg.require(&cfg.index_path, "index", "--index")?;
            DenseIndex::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        }
        None => build_index(kb, RetrievalMode::Visual, None).map_err(|e| CliError::config(e.to_string())),
    }
}

fn make_backend(cfg: &RunConfig) -> Result<Box<dyn GenerativeBackend>, CliError> {
    let backend: Box<dyn GenerativeBackend> = match cfg.backend {
        BackendKind::Mock => {
            let path = cfg.require(&cfg.script_path, "mock script", "--script")?;
            Box::new(MockBackend::from_script_path(path).map_err(|e| CliError::config(e.to_string()))?)
        }
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.remote.clone())),
    };
    check_vocabulary(backend.as_ref()).map_err(|e| CliError::config(e.to_string()))?;
    Ok(backend)
}

fn make_reranker(cfg: &RunConfig) -> Box<dyn Reranker> {
    match cfg.backend {
        BackendKind::Mock => Box::new(SimilarityReranker(LexicalOverlapScorer)),
        BackendKind::Remote => Box::new(RemoteReranker::new(cfg.services.clone())),
    }
}

fn make_embedder(cfg: &RunConfig) -> Box<dyn TextEmbedder> {
    match cfg.backend {
        BackendKind::Mock => Box::new(HashingEmbedder::new(HASHING_DIM)),
        BackendKind::Remote => Box::new(RemoteEmbedder::new(cfg.services.clone())),
    }
}

fn ingest(cfg: &RunConfig, a: IngestArgs) -> Result<(), CliError> {
    let path = a.kb_jsonl.as_ref().or(cfg.kb_path.as_ref()).cloned();
    let path = cfg.require(&path, "knowledge base", "a positional path or --kb")?;
    let kb = load_kb(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let stats = kb.stats();
    println!("documents: {}", kb.len());
    println!("sections: {}", stats.sections);
    println!("embedding_dim: {}", kb.embedding_dim());
    println!("embeddings: {}", kb.manifest().embeddings.as_str());
    println!("embedded: {}", stats.embedded);
    println!("warnings.missing_embedding: {}", stats.missing_embedding);
    println!("warnings.empty_summary: {}", stats.empty_summary);
    if a.write {
        let storage = match a.storage {
            StorageArg::Inline => EmbeddingStorage::Inline,
            StorageArg::Sidecar => EmbeddingStorage::Sidecar,
        };
        let out = cfg.output_dir.join("kb.jsonl");
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::runtime(e.to_string()))?;
        write_kb(&kb, &out, storage).map_err(|e| CliError::runtime(e.to_string()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn index(cfg: &RunConfig, a: IndexArgs) -> Result<(), CliError> {
    let kb = load_knowledge(cfg)?;
    let embedder = make_embedder(cfg);
    let index = build_index(&kb, a.mode, Some(embedder.as_ref())).map_err(|e| CliError::config(e.to_string()))?;
    let out = a.output.unwrap_or_else(|| cfg.output_dir.join(format!("index.{}.jsonl", a.mode.as_str())));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    index.write(&out).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("indexed {} documents ({}, dim {}) -> {}", index.len(), a.mode.as_str(), index.dim(), out.display());
    if !a.recall.is_empty() {
        if a.mode != RetrievalMode::Visual {
            return Err(CliError::config("recall is measured with image queries and needs a visual index"));
        }
        let samples = load_samples(cfg, Some(&kb))?;
        let queries: Vec<(Vec<f32>, String)> = samples
            .iter()
            .filter_map(|s| Some((s.image_embedding.clone()?, s.gold_doc_id.clone()?)))
            .collect();
        let report = recall_at_k(&index, &queries, &a.recall).map_err(|e| CliError::config(e.to_string()))?;
        for row in &report.rows {
            println!("recall@{}: {:.4} ({} queries)", row.k, row.recall, row.num_queries);
        }
        write_seeded(cfg, "recall.json", &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AnswerOutput<'a> {
    oracle: bool,
    config: &'a PipelineConfig,
    trace: &'a PipelineTrace,
}

fn answer(cfg: &RunConfig, a: AnswerArgs) -> Result<(), CliError> {
    let kb = load_knowledge(cfg)?;
    let sample = match (&a.id, &a.sample) {
        (_, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            let s: QuerySample =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            s.validate(Some(kb.embedding_dim())).map_err(|e| CliError::config(e.to_string()))?;
            s
        }
        (Some(id), None) => load_samples(cfg, Some(&kb))?
            .into_iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| CliError::config(format!("no sample `{id}` in the dataset")))?,
        (None, None) => return Err(CliError::config("give --id or --sample")),
    };
    let index = load_index(cfg, &kb)?;
    let backend = make_backend(cfg)?;
    let reranker = make_reranker(cfg);
    let scorer = LexicalOverlapScorer;
    let engine = Engine::new(backend.as_ref())
        .with_knowledge(&kb, &index)
        .with_reranker(reranker.as_ref())
        .with_scorer(&scorer);
    engine.check(&cfg.pipeline).map_err(|e| CliError::config(e.to_string()))?;
    let trace = if a.oracle {
        let gold = sample.gold_doc_id.as_deref().ok_or_else(|| CliError::config("oracle mode needs a gold document"))?;
        engine.run_oracle(&sample, gold, &cfg.pipeline)
    } else {
        engine.run_pipeline(&sample, &cfg.pipeline)
    }
    .map_err(|e| CliError::runtime(format!("sample `{}`: {e}", sample.id)))?;
    println!("{}", trace.answer);
    write_seeded(cfg, "trace.json", &AnswerOutput { oracle: a.oracle, config: &cfg.pipeline, trace: &trace })?;
    Ok(())
}

#[derive(Serialize)]
struct ReportOutput<'a, R: Serialize> {
    oracle: bool,
    config: &'a PipelineConfig,
    report: &'a R,
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let kb = load_knowledge(cfg)?;
    let samples = load_samples(cfg, Some(&kb))?;
    let index = load_index(cfg, &kb)?;
    let backend = make_backend(cfg)?;
    let reranker = make_reranker(cfg);
    let scorer = LexicalOverlapScorer;
    let engine = Engine::new(backend.as_ref())
        .with_knowledge(&kb, &index)
        .with_reranker(reranker.as_ref())
        .with_scorer(&scorer);
    engine.check(&cfg.pipeline).map_err(|e| CliError::config(e.to_string()))?;
    let remote_judge;
    let judge: Option<&dyn AnswerJudge> = if a.remote_judge {
        remote_judge = RemoteJudge::new(cfg.services.clone());
        Some(&remote_judge)
    } else {
        None
    };
    let opts = EvalOptions { rel_tol: cfg.rel_tol, judge };

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in samples.iter().zip(engine.run_batch(&samples, &cfg.pipeline, a.oracle)) {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => failures.push(Failure { sample_id: s.id.clone(), error: e.to_string() }),
        }
    }
    write_jsonl(&cfg.output_dir.join("traces.jsonl"), &traces)?;
    let report = evaluate(&samples, &traces, &opts).map_err(|e| CliError::runtime(e.to_string()))?;
    write_seeded(cfg, "report.json", &ReportOutput { oracle: a.oracle, config: &cfg.pipeline, report: &report })?;
    write_file(&cfg.output_dir.join("report.csv"), report.to_csv().as_bytes())?;
    println!("samples: {}", report.num_samples);
    println!("accuracy: {:.4}", report.accuracy);
    for (name, d) in &report.datasets {
        for s in &d.splits {
            println!("{name}/{}: {:.4} ({} samples)", s.split, s.value, s.num_samples);
        }
    }

    if a.ablations {
        if a.oracle {
            return Err(CliError::config("--ablations runs the retrieval pipeline and cannot be combined with --oracle"));
        }
        let variants = AblationVariant::all(&cfg.pipeline);
        let outcomes = run_ablation(&engine, &samples, &variants, &opts).map_err(|e| CliError::runtime(e.to_string()))?;
        write_seeded(cfg, "ablations.json", &outcomes)?;
        write_file(&cfg.output_dir.join("ablations.csv"), ablation_csv(&outcomes).as_bytes())?;
        for (name, o) in &outcomes {
            println!("ablation {}: accuracy {:.4}", name.as_str(), o.report.accuracy);
            failures.extend(o.failures.iter().map(|f| Failure {
                sample_id: f.sample_id.clone(),
                error: format!("variant {}: {}", name.as_str(), f.error),
            }));
        }
    }
    finish(cfg, "eval", failures, samples.len())
}

#[derive(Serialize)]
struct MineOutput<'a, R: Serialize, S: Serialize> {
    stage: u8,
    report: &'a R,
    skipped: &'a S,
}

#[derive(Serialize)]
struct TripletRecord<'a> {
    sample_id: &'a str,
    gold_doc_id: &'a str,
    #[serde(flatten)]
    triplet: &'a Stage2Triplet,
}

fn mine(cfg: &RunConfig, a: MineArgs) -> Result<(), CliError> {
    let kb = load_knowledge(cfg)?;
    let samples = load_samples(cfg, Some(&kb))?;
    let out = &cfg.output_dir;
    match a.stage {
        1 => {
            let remote;
            let annotator: &dyn PassageAnnotator = match cfg.backend {
                BackendKind::Mock => &HeuristicAnnotator,
                BackendKind::Remote => {
                    remote = RemoteAnnotator::new(cfg.services.clone());
                    &remote
                }
            };
            let scorer: &dyn TextSimilarity = &LexicalOverlapScorer;
            let with_gold: Vec<QuerySample> = samples.into_iter().filter(|s| s.gold_doc_id.is_some()).collect();
            let ds = build_stage1(annotator, scorer, &kb, &with_gold, a.retries)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            write_jsonl(&out.join("stage1.jsonl"), &ds.sequences)?;
            write_jsonl(&out.join("stage1_groups.jsonl"), &ds.groups)?;
            write_seeded(cfg, "stage1_report.json", &MineOutput { stage: 1, report: &ds.report, skipped: &ds.skipped })?;
            println!("stage 1: {} groups, {} sequences, {} skipped", ds.groups.len(), ds.sequences.len(), ds.skipped.len());
        }
        _ => {
            let index = load_index(cfg, &kb)?;
            let backend = make_backend(cfg)?;
            let (with_gold, noret): (Vec<QuerySample>, Vec<QuerySample>) =
                samples.into_iter().partition(|s| s.gold_doc_id.is_some());
            let (triplets, skipped) = mine_stage2(backend.as_ref(), &index, &kb, &with_gold, cfg.seed);
            let ds = emit_stage2_sequences(&triplets, &noret, cfg.seed).map_err(|e| CliError::runtime(e.to_string()))?;
            let records: Vec<_> = triplets
                .iter()
                .map(|(s, t)| TripletRecord {
                    sample_id: &s.id,
                    gold_doc_id: s.gold_doc_id.as_deref().unwrap_or_default(),
                    triplet: t,
                })
                .collect();
            write_jsonl(&out.join("stage2.jsonl"), &ds.sequences)?;
            write_jsonl(&out.join("stage2_triplets.jsonl"), &records)?;
            write_seeded(cfg, "stage2_report.json", &MineOutput { stage: 2, report: &ds.report, skipped: &skipped })?;
            println!("stage 2: {} triplets, {} sequences, {} skipped", triplets.len(), ds.sequences.len(), skipped.len());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepCell {
    k: usize,
    /// `None` for the no-re-ranking baseline.
    k_p: Option<usize>,
    accuracy: f64,
    num_samples: usize,
    failures: usize,
}

#[derive(Serialize)]
struct SweepGrid<'a> {
    mode: &'a str,
    ks: &'a [usize],
    kps: &'a [usize],
    cells: Vec<SweepCell>,
}

fn sweep(cfg: &RunConfig, a: SweepArgs) -> Result<(), CliError> {
    if a.ks.is_empty() || a.kps.is_empty() || a.ks.contains(&0) || a.kps.contains(&0) {
        return Err(CliError::config("--ks and --kps must be non-empty lists of positive integers"));
    }
    let kb = load_knowledge(cfg)?;
    let samples = load_samples(cfg, Some(&kb))?;
    let index = load_index(cfg, &kb)?;
    let backend = make_backend(cfg)?;
    let reranker = make_reranker(cfg);
    let engine = Engine::new(backend.as_ref()).with_knowledge(&kb, &index).with_reranker(reranker.as_ref());
    let opts = EvalOptions { rel_tol: cfg.rel_tol, judge: None };
    let (mode, rerank): (&str, fn(usize) -> Rerank) = match a.mode {
        SweepMode::Builtin => ("builtin", |k_p| Rerank::BuiltIn { k_p }),
        SweepMode::External => ("external", |k_p| Rerank::External { k_p }),
    };
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &k in &a.ks {
        let settings = std::iter::once(None).chain(a.kps.iter().map(|&k_p| Some(k_p)));
        for k_p in settings {
            let config = PipelineConfig {
                top_k_docs: k,
                rerank: k_p.map_or(Rerank::None, rerank),
                ..cfg.pipeline.clone()
            };
            engine.check(&config).map_err(|e| CliError::config(e.to_string()))?;
            let o = run_and_evaluate(&engine, &samples, &config, &opts).map_err(|e| CliError::runtime(e.to_string()))?;
            let label = k_p.map_or("baseline".to_string(), |v| v.to_string());
            println!("k={k} k_p={label}: {:.4}", o.report.accuracy);
            failures.extend(o.failures.iter().map(|f| Failure {
                sample_id: f.sample_id.clone(),
                error: format!("k={k} k_p={label}: {}", f.error),
            }));
            cells.push(SweepCell {
                k,
                k_p,
                accuracy: o.report.accuracy,
                num_samples: o.report.num_samples,
                failures: o.failures.len(),
            });
        }
    }
    let mut csv = String::from("k,k_p,accuracy,num_samples,failures\n");
    for c in &cells {
        let kp = c.k_p.map_or("baseline".to_string(), |v| v.to_string());
        csv.push_str(&format!("{},{},{:.6},{},{}\n", c.k, kp, c.accuracy, c.num_samples, c.failures));
    }
    write_seeded(cfg, "rerank_sweep.json", &SweepGrid { mode, ks: &a.ks, kps: &a.kps, cells })?;
    write_file(&cfg.output_dir.join("rerank_sweep.csv"), csv.as_bytes())?;
    finish(cfg, "rerank-sweep", failures, samples.len() * a.ks.len() * (a.kps.len() + 1))
}

fn token_acc(cfg: &RunConfig, a: TokenAccArgs) -> Result<(), CliError> {
    let kb = load_knowledge(cfg)?;
    let samples = load_samples(cfg, Some(&kb))?;
    if !a.suite.exists() {
        return Err(CliError::config(format!("suite {} does not exist", a.suite.display())));
    }
    let suite: Vec<TokenExpectation> =
        read_jsonl(&a.suite).map_err(|e| CliError::config(format!("{}: {e}", a.suite.display())))?;
    let by_id: BTreeMap<&str, &QuerySample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for e in &suite {
        if !by_id.contains_key(e.sample_id.as_str()) {
            return Err(CliError::config(format!("suite sample `{}` is not in the dataset", e.sample_id)));
        }
    }
    let backend = make_backend(cfg)?;
    let engine = Engine::new(backend.as_ref()).with_kb(&kb);
    let mut observations = Vec::new();
    let mut failures = Vec::new();
    for e in &suite {
        let passages: Vec<_> = e.passages.iter().map(|p| p.passage.clone()).collect();
        match engine.probe(by_id[e.sample_id.as_str()], &passages) {
            Ok(p) => observations.push(TokenObservation::from_probe(e.sample_id.clone(), p)),
            Err(err) => failures.push(Failure { sample_id: e.sample_id.clone(), error: err.to_string() }),
        }
    }
    let answered: Vec<TokenExpectation> = suite
        .iter()
        .filter(|e| observations.iter().any(|o| o.sample_id == e.sample_id))
        .cloned()
        .collect();
    let report = token_accuracy(&observations, &answered).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("ret: {:.4}", report.ret.accuracy);
    println!("noret: {:.4}", report.noret.accuracy);
    println!("rel_positive: {:.4}", report.rel_positive.accuracy);
    println!("norel_soft: {:.4}", report.norel_soft.accuracy);
    println!("norel_hard: {:.4}", report.norel_hard.accuracy);
    write_seeded(cfg, "token_accuracy.json", &report)?;
    finish(cfg, "token-acc", failures, suite.len())
}

fn synth(cfg: &RunConfig, a: SynthArgs) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec {
            num_docs: a.num_docs,
            num_samples: a.num_samples,
            dim: a.dim,
            seed: cfg.seed,
            ..SyntheticSpec::default()
        },
    };
    let world = SyntheticWorld::generate(&spec).map_err(|e| CliError::config(e.to_string()))?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    write_kb(&world.kb, &out.join("kb.jsonl"), EmbeddingStorage::Inline).map_err(|e| CliError::runtime(e.to_string()))?;
    write_jsonl(&out.join("samples.jsonl"), &world.samples)?;
    write_jsonl(&out.join("facts.jsonl"), &world.facts)?;
    write_json(&out.join("script.json"), &world.script)?;
    write_json(&out.join("spec.json"), &spec)?;
    let config = format!(
        "# Generated by `reflectiva synth`.\nseed = {}\nbackend = \"mock\"\nkb_path = \"kb.jsonl\"\ndataset_path = \"samples.jsonl\"\nscript_path = \"script.json\"\n\n[pipeline]\ntop_k_docs = 5\n",
        spec.seed
    );
    write_file(&out.join("config.toml"), config.as_bytes())?;
    println!("{} documents, {} samples -> {}", world.kb.len(), world.samples.len(), out.display());
    Ok(())
}
