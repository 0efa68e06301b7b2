use reflectiva::eval::{infoseek_aggregate, relaxed_accuracy, round1, token_f1_em, vqa_accuracy, DEFAULT_REL_TOL};

use crate::{ensure, Outcome};

/// Published InfoSeek (Unseen-Q, Unseen-E, All) rows with both splits reported.
const ROWS: [(f64, f64, f64); 16] = [
    (0.3, 0.0, 0.0),
    (1.5, 0.0, 0.0),
    (2.1, 0.0, 0.0),
    (7.3, 5.0, 5.9),
    (12.7, 12.3, 12.5),
    (8.9, 7.4, 8.1),
    (9.6, 9.4, 9.5),
    (8.3, 8.9, 7.8),
    (15.0, 14.3, 14.6),
    (30.1, 27.8, 28.9),
    (28.6, 25.7, 27.1),
    (30.0, 30.7, 30.4),
    (18.0, 19.8, 18.8),
    (34.5, 32.9, 33.7),
    (40.4, 39.8, 40.1),
    (28.6, 28.1, 28.3),
];

const NAMED: [(f64, f64, f64); 4] = [(40.4, 39.8, 40.1), (34.5, 32.9, 33.7), (28.6, 28.1, 28.3), (30.1, 27.8, 28.9)];

const TOL: f64 = 0.05 + 1e-9;

pub fn run_aggregates() -> Outcome {
    let mut misses = Vec::new();
    for &(q, e, all) in &ROWS {
        let got = round1(infoseek_aggregate(q, e));
        if (got - all).abs() > TOL {
            misses.push(format!("({q}, {e}) -> {:.3} rounds to {got}, printed {all}", infoseek_aggregate(q, e)));
        }
    }
    for &(q, e, all) in &NAMED {
        let got = round1(infoseek_aggregate(q, e));
        ensure!((got - all).abs() <= TOL, "named pair ({q}, {e}) -> {got}, want {all}");
    }
    ensure!(
        misses.is_empty(),
        "{}/{} rows reproduced (all four named pairs pass); unreproducible: {}",
        ROWS.len() - misses.len(),
        ROWS.len(),
        misses.join("; ")
    );
    Ok(format!("{} rows reproduced within ±0.05", ROWS.len()))
}

fn golds(g: &[&str]) -> Vec<String> {
    g.iter().map(|s| s.to_string()).collect()
}

pub fn run_fixtures() -> Outcome {
    let vqa: [(&str, &[&str], f64); 7] = [
        ("Bamboo", &["bamboo"], 1.0),
        ("The Eiffel Tower.", &["eiffel tower"], 1.0),
        ("an oak", &["Oak"], 1.0),
        ("Red Sea", &["Mediterranean Sea", "Mediterranean"], 0.0),
        ("Mediterranean", &["Mediterranean Sea", "Mediterranean"], 1.0),
        ("", &["x"], 0.0),
        ("Paris, France", &["Paris"], 0.0),
    ];
    for (p, g, want) in vqa {
        let got = vqa_accuracy(p, &golds(g));
        ensure!(got == want, "vqa_accuracy({p:?}, {g:?}) = {got}, want {want}");
    }
    let relaxed: [(&str, &[&str], f64); 10] = [
        ("150", &["120"], 0.0),
        ("125", &["120"], 1.0),
        ("126", &["120"], 1.0),
        ("126.1", &["120"], 0.0),
        ("114", &["120"], 1.0),
        ("113.9", &["120"], 0.0),
        ("about 1,000 metres", &["1000"], 1.0),
        ("0", &["0"], 1.0),
        ("0.1", &["0"], 0.0),
        ("Blue", &["blue"], 1.0),
    ];
    for (p, g, want) in relaxed {
        let got = relaxed_accuracy(p, &golds(g), DEFAULT_REL_TOL);
        ensure!(got == want, "relaxed_accuracy({p:?}, {g:?}) = {got}, want {want}");
    }
    let f1: [(&str, &str, f64, f64); 6] = [
        ("training ground", "training home", 0.5, 0.0),
        ("training ground", "training ground", 1.0, 1.0),
        ("The Training Ground!", "training ground", 1.0, 1.0),
        ("red", "blue", 0.0, 0.0),
        // precision 1/3, recall 1 -> 2·(1/3)/(4/3)
        ("red big car", "car", 0.5, 0.0),
        // precision 2/2, recall 2/4 -> 2/3
        ("new york", "new york city hall", 2.0 / 3.0, 0.0),
    ];
    for (p, g, want_f1, want_em) in f1 {
        let (f, em) = token_f1_em(p, g);
        ensure!(f == want_f1 && em == want_em, "token_f1_em({p:?}, {g:?}) = ({f}, {em}), want ({want_f1}, {want_em})");
    }
    Ok(format!("{} vqa, {} relaxed and {} F1/EM fixtures exact", 7, 10, 6))
}
