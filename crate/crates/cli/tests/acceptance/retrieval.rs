use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflectiva::index::recall_at_k;
use reflectiva::{DenseIndex, RetrievalMode};

use crate::common::brute_force;
use crate::{ensure, Outcome};

const N: usize = 1000;
const DIM: usize = 32;
const QUERIES: usize = 100;

fn unit(rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let docs: Vec<Vec<f32>> = (0..N).map(|_| unit(&mut rng)).collect();
    let queries: Vec<Vec<f32>> = (0..QUERIES).map(|_| unit(&mut rng)).collect();
    let index = DenseIndex::from_entries(RetrievalMode::Visual, DIM, docs.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.clone())))
        .map_err(|e| e.to_string())?;

    let mut oracle_ranks = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let want = brute_force(&docs, q);
        for k in [1, 5, 20] {
            let hits = index.search(q, k).map_err(|e| e.to_string())?;
            ensure!(hits.len() == k, "query {qi} k={k}: {} hits", hits.len());
            for (i, h) in hits.iter().enumerate() {
                let (row, score) = want[i];
                ensure!(h.doc_id == format!("d{row}"), "query {qi} k={k} rank {}: {} vs oracle d{row}", i + 1, h.doc_id);
                ensure!((h.score - score).abs() < 1e-6, "query {qi} k={k} rank {}: score {} vs {score}", i + 1, h.score);
                ensure!(h.rank == i + 1, "query {qi}: rank field {}", h.rank);
            }
        }
        oracle_ranks.push(want);
    }

    // Recall: gold is a random document per query.
    let golds: Vec<usize> = (0..QUERIES).map(|_| rng.random_range(0..N)).collect();
    let pairs: Vec<(Vec<f32>, String)> = queries.iter().zip(&golds).map(|(q, g)| (q.clone(), format!("d{g}"))).collect();
    let ks: Vec<usize> = vec![1, 5, 10, 20, 50, 100, 200, 500, 1000];
    let report = recall_at_k(&index, &pairs, &ks).map_err(|e| e.to_string())?;
    ensure!(report.errors.is_empty(), "recall errors: {:?}", report.errors);
    for (row, &k) in report.rows.iter().zip(&ks) {
        let hits = oracle_ranks.iter().zip(&golds).filter(|(r, &g)| r.iter().take(k).any(|&(i, _)| i == g)).count();
        let want = hits as f64 / QUERIES as f64;
        ensure!(row.recall == want, "recall@{k} {} vs oracle {want}", row.recall);
    }
    ensure!(report.rows.windows(2).all(|w| w[0].recall <= w[1].recall), "recall not monotone");
    ensure!(report.rows.last().unwrap().recall == 1.0, "recall@N != 1");
    Ok(format!("{QUERIES} queries × k∈{{1,5,20}} over {N}×{DIM} match the exhaustive oracle; recall monotone over {} cut-offs", ks.len()))
}
