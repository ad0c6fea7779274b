use std::collections::HashMap;

use smith_core::corpus::{words, PairRecord};

fn counts(text: &str) -> HashMap<String, f64> {
    let mut m = HashMap::new();
    for w in words(text) {
        *m.entry(w).or_insert(0.0) += 1.0;
    }
    m
}

pub fn bow_cosine(a: &str, b: &str) -> f64 {
    let (ca, cb) = (counts(a), counts(b));
    let dot: f64 = ca.iter().map(|(w, x)| x * cb.get(w).unwrap_or(&0.0)).sum();
    let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Accuracy of predicting a match when the bag-of-words cosine reaches the
/// median score of the set.
pub fn bow_accuracy(pairs: &[PairRecord]) -> f64 {
    let scores: Vec<f64> = pairs
        .iter()
        .map(|p| bow_cosine(&p.source.text, &p.target.text))
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let hits = scores
        .iter()
        .zip(pairs)
        .filter(|(&s, p)| u8::from(s >= median) == p.label)
        .count();
    hits as f64 / n as f64
}
