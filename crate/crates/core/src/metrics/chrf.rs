use std::collections::HashMap;

pub const CHAR_ORDER: usize = 6;
pub const WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;

fn counts<T: std::hash::Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// (hypothesis n-grams, reference n-grams, matched n-grams) for one order.
fn order_stats<T: std::hash::Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = counts(hyp, n);
    let r = counts(reference, n);
    let matched = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (h.values().sum(), r.values().sum(), matched)
}

/// Averages precision and recall over the orders where both sides have n-grams, then
/// combines them with recall weight `beta`.
pub fn f_from_stats(stats: &[(usize, usize, usize)], beta: f64) -> f64 {
    let mut p = 0.0;
    let mut r = 0.0;
    let mut effective = 0;
    for &(nh, nr, m) in stats {
        if nh > 0 && nr > 0 {
            p += m as f64 / nh as f64;
            r += m as f64 / nr as f64;
            effective += 1;
        }
    }
    if effective == 0 {
        return 0.0;
    }
    p /= effective as f64;
    r /= effective as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

fn sentence_stats(hyp: &str, reference: &str) -> Vec<(usize, usize, usize)> {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw: Vec<&str> = hyp.split_whitespace().collect();
    let rw: Vec<&str> = reference.split_whitespace().collect();
    let mut stats: Vec<_> = (1..=CHAR_ORDER).map(|n| order_stats(&hc, &rc, n)).collect();
    stats.extend((1..=WORD_ORDER).map(|n| order_stats(&hw, &rw, n)));
    stats
}

/// ChrF++ in `[0, 1]`: character 1..6-grams (whitespace removed) plus word 1..2-grams,
/// best over references.
pub fn chrf_pp(candidate: &str, references: &[&str]) -> f64 {
    if candidate.trim().is_empty() || references.is_empty() {
        tracing::warn!("ChrF++ on an empty candidate or reference set");
        return 0.0;
    }
    references
        .iter()
        .filter(|r| !r.trim().is_empty())
        .map(|r| f_from_stats(&sentence_stats(candidate, r), CHRF_BETA))
        .fold(0.0, f64::max)
}
