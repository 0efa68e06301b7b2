use std::collections::HashMap;
use std::path::Path;

use reflectiva::forge::{Label, Stage1Group, TrainSegmentKind, TrainingSequence};
use reflectiva::io::read_jsonl;
use reflectiva::kb::load_kb;
use reflectiva::QuerySample;
use serde_json::Value;

use crate::common::cli_ok;
use crate::{ensure, Outcome};

const FILES: [&str; 6] =
    ["stage1.jsonl", "stage1_groups.jsonl", "stage1_report.json", "stage2.jsonl", "stage2_triplets.jsonl", "stage2_report.json"];

fn mine_into(dir: &Path, out: &str) -> Result<(), String> {
    for stage in ["1", "2"] {
        cli_ok(dir, &["--config", "world/config.toml", "--out", out, "mine", "--stage", stage])?;
    }
    Ok(())
}

/// Image, question and passage segments carry no loss; reflective tokens and answers do.
fn check_mask(s: &TrainingSequence) -> Result<(), String> {
    ensure!(s.loss_mask.len() == s.segments.len(), "{}: mask length {} for {} segments", s.sample_id, s.loss_mask.len(), s.segments.len());
    for (seg, &m) in s.segments.iter().zip(&s.loss_mask) {
        let want = match seg.kind {
            TrainSegmentKind::Image | TrainSegmentKind::Question | TrainSegmentKind::Passage => false,
            TrainSegmentKind::ControlToken | TrainSegmentKind::Answer => true,
        };
        ensure!(m == want, "{}: {:?} segment has mask {m}", s.sample_id, seg.kind);
        if seg.kind == TrainSegmentKind::Passage {
            ensure!(seg.payload.starts_with("<paragraph>\n") && seg.payload.ends_with("\n</paragraph>"), "{}: unmarked passage", s.sample_id);
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    cli_ok(dir, &["--seed", "11", "--out", "world", "synth", "--num-docs", "60", "--num-samples", "200"])?;
    mine_into(dir, "run1")?;
    mine_into(dir, "run2")?;
    for f in FILES {
        let a = std::fs::read(dir.join("run1").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir.join("run2").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(a == b, "{f} differs between two runs with the same seed");
    }

    let kb = load_kb(&dir.join("world/kb.jsonl")).map_err(|e| e.to_string())?;
    let samples: Vec<QuerySample> = read_jsonl(&dir.join("world/samples.jsonl")).map_err(|e| e.to_string())?;
    let gold: HashMap<&str, &str> =
        samples.iter().filter_map(|s| Some((s.id.as_str(), s.gold_doc_id.as_deref()?))).collect();
    let run = dir.join("run1");

    let groups: Vec<Stage1Group> = read_jsonl(&run.join("stage1_groups.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!groups.is_empty(), "no stage-1 groups");
    for g in &groups {
        let doc = gold[g.sample_id.as_str()];
        ensure!(g.passages.iter().any(|p| p.label == Label::Positive), "{}: group without a positive", g.sample_id);
        ensure!(g.passages.iter().any(|p| p.label == Label::Negative), "{}: group without a negative", g.sample_id);
        ensure!(g.passages.iter().all(|p| p.passage.doc_id == doc), "{}: passage outside the gold document", g.sample_id);
    }
    // Every knowledge sample is grouped unless its gold document has one section.
    let report: Value = serde_json::from_slice(&std::fs::read(run.join("stage1_report.json")).unwrap()).map_err(|e| e.to_string())?;
    let skipped = report["skipped"].as_array().ok_or("stage-1 report lacks `skipped`")?;
    for s in skipped {
        let id = s["sample_id"].as_str().unwrap_or_default();
        let n = kb.passages_of(gold[id]).map_or(0, |p| p.len());
        ensure!(n < 2, "{id} skipped although its gold document has {n} sections");
    }
    ensure!(groups.len() + skipped.len() == gold.len(), "{} groups + {} skipped != {} knowledge samples", groups.len(), skipped.len(), gold.len());

    let triplets: Vec<Value> = read_jsonl(&run.join("stage2_triplets.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!triplets.is_empty(), "no stage-2 triplets");
    for t in &triplets {
        let id = t["sample_id"].as_str().unwrap_or_default();
        let doc = gold.get(id).copied().ok_or(format!("triplet for unknown sample {id}"))?;
        ensure!(t["gold_doc_id"] == doc, "{id}: triplet gold mismatch");
        let member = |key: &str| -> Result<(String, usize), String> {
            let p = &t[key];
            let d = p["doc_id"].as_str().ok_or(format!("{id}: {key} lacks doc_id"))?.to_string();
            let s = p["section_index"].as_u64().ok_or(format!("{id}: {key} lacks section_index"))? as usize;
            let passages = kb.passages_of(&d).map_err(|e| format!("{id}: {key}: {e}"))?;
            let text = &passages.get(s).ok_or(format!("{id}: {key} section {s} missing"))?.text;
            ensure!(p["text"] == text.as_str(), "{id}: {key} text differs from the knowledge base");
            Ok((d, s))
        };
        let pos = member("positive")?;
        let hard = member("hard_negative")?;
        let soft = member("soft_negative")?;
        ensure!(pos.0 == doc && hard.0 == doc, "{id}: positive or hard negative outside the gold document");
        ensure!(pos != hard, "{id}: positive equals hard negative");
        ensure!(soft.0 != doc, "{id}: soft negative from the gold document");
    }

    let mut sequences = 0;
    for f in ["stage1.jsonl", "stage2.jsonl"] {
        let seqs: Vec<TrainingSequence> = read_jsonl(&run.join(f)).map_err(|e| e.to_string())?;
        for s in &seqs {
            check_mask(s)?;
        }
        sequences += seqs.len();
    }
    Ok(format!(
        "{} groups, {} triplets, {sequences} sequences satisfy membership and mask invariants; reruns byte-identical",
        groups.len(),
        triplets.len()
    ))
}
