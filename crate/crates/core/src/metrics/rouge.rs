use serde::{Deserialize, Serialize};

use crate::tokenizer::pre_tokenize;

/// Recall weight of the LCS F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Longest common subsequence length, `O(|a|·|b|)` time and `O(|b|)` memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// LCS precision, recall and F over token sequences; with several references the one
/// giving the highest F is reported. Empty inputs score zero.
pub fn rouge_l<T: PartialEq>(candidate: &[T], references: &[&[T]]) -> RougeScore {
    if candidate.is_empty() || references.is_empty() {
        tracing::warn!("ROUGE-L on an empty candidate or reference set");
        return RougeScore::default();
    }
    let mut best = RougeScore::default();
    for r in references {
        if r.is_empty() {
            tracing::warn!("ROUGE-L skipping an empty reference");
            continue;
        }
        let l = lcs_len(candidate, r) as f64;
        let p = l / candidate.len() as f64;
        let rec = l / r.len() as f64;
        let s = RougeScore {
            precision: p,
            recall: rec,
            f: f_beta(p, rec, ROUGE_L_BETA),
        };
        if s.f > best.f {
            best = s;
        }
    }
    best
}

/// Text form: lowercased word tokens with punctuation split off as separate tokens.
pub fn rouge_l_text(candidate: &str, references: &[&str]) -> RougeScore {
    let c = pre_tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| pre_tokenize(r)).collect();
    let refs: Vec<&[String]> = refs.iter().map(Vec::as_slice).collect();
    rouge_l(&c, &refs)
}
