//! Beam search over any backend that maps token histories to next-token logits.

use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::processors::{
    any_finite, apply_repetition_penalty, apply_temperature, block_ngrams, eos_length_decay, log_softmax,
    mask_min_length, top_k,
};
use super::DecodeConfig;

/// Source of next-token logits for a set of live beams.
pub trait DecodeBackend {
    type State;

    fn vocab_size(&self) -> usize;

    /// Logits for the first generated position.
    fn start(&self) -> Result<(Vec<f64>, Self::State)>;

    /// Extends beam `parents[i]` of `state` with `tokens[i]` and returns one logit row
    /// per new beam.
    fn step(&self, state: &Self::State, parents: &[usize], tokens: &[u32]) -> Result<(Vec<Vec<f64>>, Self::State)>;
}

/// Backend whose logits are a pure function of the generated history.
pub struct HistoryBackend<F> {
    pub vocab: usize,
    pub logits: F,
}

impl<F: Fn(&[u32]) -> Vec<f64>> DecodeBackend for HistoryBackend<F> {
    type State = Vec<Vec<u32>>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<(Vec<f64>, Self::State)> {
        Ok(((self.logits)(&[]), vec![Vec::new()]))
    }

    fn step(&self, state: &Self::State, parents: &[usize], tokens: &[u32]) -> Result<(Vec<Vec<f64>>, Self::State)> {
        let next: Vec<Vec<u32>> = parents
            .iter()
            .zip(tokens)
            .map(|(&p, &t)| {
                let mut h = state[p].clone();
                h.push(t);
                h
            })
            .collect();
        Ok((next.iter().map(|h| (self.logits)(h)).collect(), next))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub token_ids: Vec<u32>,
    pub cumulative_log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub best: BeamState,
    pub finished: Vec<BeamState>,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl BeamOutcome {
    /// Winning tokens with a trailing EOS removed.
    pub fn content_tokens(&self, eos: u32) -> &[u32] {
        let t = &self.best.token_ids;
        match t.last() {
            Some(&last) if self.best.finished && last == eos => &t[..t.len() - 1],
            _ => t,
        }
    }
}

/// Applies the full processor chain to one raw logit row and returns next-token
/// log-probabilities. The flag is set when the n-gram block had to be lifted.
pub fn step_log_probs(raw: &[f64], history: &[u32], cfg: &DecodeConfig, eos: u32) -> Result<(Vec<f64>, bool)> {
    if raw.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN logit at generated length {}", history.len())));
    }
    let run = |block: bool| {
        let mut l = raw.to_vec();
        apply_temperature(&mut l, cfg.temperature);
        apply_repetition_penalty(&mut l, history, cfg.repetition_penalty, cfg.repetition_convention);
        if block {
            block_ngrams(&mut l, history, cfg.no_repeat_ngram);
        }
        let len = history.len();
        mask_min_length(&mut l, len, cfg.min_length, eos);
        eos_length_decay(&mut l, len, cfg.length_decay_start, cfg.length_decay_factor, eos);
        top_k(&mut l, cfg.top_k);
        log_softmax(&mut l);
        l
    };
    let l = run(true);
    if any_finite(&l) {
        return Ok((l, false));
    }
    Ok((run(false), true))
}

struct Candidate {
    score: f64,
    parent: usize,
    token: u32,
}

fn by_rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Beam search. At each step every finite (beam, token) candidate is ranked by
/// cumulative score (ties: lower beam index, then lower token id). EOS candidates ranked
/// within the first `beam_size` enter the finished pool, which keeps the best
/// `beam_size`; the first `beam_size` non-EOS candidates continue. Search ends at
/// `max_length` tokens or once the pool is full and no live beam scores above its worst
/// member. The best finished beam wins, otherwise the best live beam.
pub fn beam_search<B: DecodeBackend>(backend: &B, cfg: &DecodeConfig, eos: u32) -> Result<BeamOutcome> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let max_length = cfg.resolved_max_length();
    let mut warnings = Vec::new();
    let (first, mut state) = backend.start()?;
    let mut rows = vec![first];
    let mut live = vec![BeamState {
        token_ids: Vec::new(),
        cumulative_log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<BeamState> = Vec::new();
    let mut steps = 0;

    while steps < max_length && !live.is_empty() {
        steps += 1;
        let mut cands = Vec::new();
        for (i, (beam, raw)) in live.iter().zip(&rows).enumerate() {
            if raw.len() != backend.vocab_size() {
                return Err(Error::Numeric(format!(
                    "backend returned {} logits for a {}-token vocabulary",
                    raw.len(),
                    backend.vocab_size()
                )));
            }
            let (lp, lifted) = step_log_probs(raw, &beam.token_ids, cfg, eos)?;
            if lifted {
                let msg = format!(
                    "all candidates masked at length {}; n-gram block lifted for beam {i}",
                    beam.token_ids.len()
                );
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            cands.extend(lp.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(t, v)| Candidate {
                score: beam.cumulative_log_prob + v,
                parent: i,
                token: t as u32,
            }));
        }
        cands.sort_by(by_rank);

        let mut next = Vec::with_capacity(k);
        for (rank, c) in cands.iter().enumerate() {
            if c.token == eos {
                if rank < k {
                    let mut token_ids = live[c.parent].token_ids.clone();
                    token_ids.push(eos);
                    offer(
                        &mut pool,
                        k,
                        BeamState {
                            token_ids,
                            cumulative_log_prob: c.score,
                            finished: true,
                        },
                    );
                }
            } else if next.len() < k {
                next.push(c);
            }
            if next.len() == k && rank + 1 >= k {
                break;
            }
        }

        let new_live: Vec<BeamState> = next
            .iter()
            .map(|c| {
                let mut token_ids = live[c.parent].token_ids.clone();
                token_ids.push(c.token);
                BeamState {
                    token_ids,
                    cumulative_log_prob: c.score,
                    finished: false,
                }
            })
            .collect();
        let done = new_live.is_empty()
            || steps == max_length
            || (pool.len() == k && new_live[0].cumulative_log_prob <= pool[k - 1].cumulative_log_prob);
        if !done {
            let parents: Vec<usize> = next.iter().map(|c| c.parent).collect();
            let tokens: Vec<u32> = next.iter().map(|c| c.token).collect();
            let (r, s) = backend.step(&state, &parents, &tokens)?;
            rows = r;
            state = s;
        }
        live = new_live;
        if done {
            break;
        }
    }

    let best = pool
        .first()
        .cloned()
        .or_else(|| live.first().cloned())
        .ok_or_else(|| Error::Numeric("beam search produced no candidates".into()))?;
    Ok(BeamOutcome {
        best,
        finished: pool,
        steps,
        warnings,
    })
}

fn offer(pool: &mut Vec<BeamState>, k: usize, beam: BeamState) {
    if pool.len() == k {
        if beam.cumulative_log_prob <= pool[k - 1].cumulative_log_prob {
            return;
        }
        pool.pop();
    }
    let at = pool
        .iter()
        .position(|b| beam.cumulative_log_prob > b.cumulative_log_prob)
        .unwrap_or(pool.len());
    pool.insert(at, beam);
}
