//! Per-step logit processors. Each operates in place on one beam's score row; masked
//! entries are set to `-inf`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// How a repetition penalty `p` acts on the logit of an already generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepetitionConvention {
    /// Positive logits are multiplied by `p`, negative ones divided by it. With `p < 1`
    /// repeats become less likely.
    #[default]
    Discount,
    /// Positive logits are divided by `p`, negative ones multiplied by it.
    Divide,
}

pub fn apply_temperature(logits: &mut [f64], t: f64) {
    if t != 1.0 {
        logits.iter_mut().for_each(|v| *v /= t);
    }
}

/// `generated` may contain duplicates; each distinct token is penalized once.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[u32], p: f64, convention: RepetitionConvention) {
    if p == 1.0 {
        return;
    }
    let mut seen = HashSet::new();
    for &tok in generated {
        if !seen.insert(tok) {
            continue;
        }
        let Some(v) = logits.get_mut(tok as usize) else {
            continue;
        };
        let scale_up = match convention {
            RepetitionConvention::Discount => *v <= 0.0,
            RepetitionConvention::Divide => *v > 0.0,
        };
        if scale_up {
            *v /= p;
        } else {
            *v *= p;
        }
    }
}

/// Tokens that would complete an `n`-gram already present in `tokens`.
pub fn banned_ngram_tokens(tokens: &[u32], n: usize) -> Vec<u32> {
    if n < 2 || tokens.len() + 1 < n {
        return Vec::new();
    }
    let ctx = &tokens[tokens.len() + 1 - n..];
    let mut out: Vec<u32> = tokens
        .windows(n)
        .filter(|w| &w[..n - 1] == ctx)
        .map(|w| w[n - 1])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Returns the number of entries newly masked.
pub fn block_ngrams(logits: &mut [f64], tokens: &[u32], n: usize) -> usize {
    let mut masked = 0;
    for tok in banned_ngram_tokens(tokens, n) {
        if let Some(v) = logits.get_mut(tok as usize) {
            if *v != f64::NEG_INFINITY {
                *v = f64::NEG_INFINITY;
                masked += 1;
            }
        }
    }
    masked
}

pub fn mask_min_length(logits: &mut [f64], current_length: usize, min_length: usize, eos_id: u32) {
    if current_length < min_length {
        if let Some(v) = logits.get_mut(eos_id as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
}

/// Past `start` tokens, adds `(current_length - start) * ln(factor)` to the EOS logit.
pub fn eos_length_decay(logits: &mut [f64], current_length: usize, start: usize, factor: f64, eos_id: u32) {
    if current_length > start {
        if let Some(v) = logits.get_mut(eos_id as usize) {
            *v += (current_length - start) as f64 * factor.ln();
        }
    }
}

/// Keeps the `k` highest finite entries (ties go to the lower index) and masks the rest.
pub fn top_k(logits: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if order.len() <= k {
        return;
    }
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &order[k..] {
        logits[i] = f64::NEG_INFINITY;
    }
}

/// Log-softmax over the finite entries; masked entries stay `-inf`.
pub fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let lse = max + logits.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in logits.iter_mut() {
        if v.is_finite() {
            *v -= lse;
        }
    }
}

pub fn any_finite(logits: &[f64]) -> bool {
    logits.iter().any(|v| v.is_finite())
}
