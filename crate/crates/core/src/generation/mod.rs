//! Story generation: beam search over a (styled) LM conditioned on a visual prefix.

pub mod beam;
pub mod processors;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapters::StyledLanguageModel;
use crate::error::{Error, Result};
use crate::lm::KvCache;
use crate::mapper::VisualPrefix;
use crate::tokenizer::WordTokenizer;

pub use beam::{beam_search, step_log_probs, BeamOutcome, BeamState, DecodeBackend, HistoryBackend};
pub use processors::RepetitionConvention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub repetition_penalty: f64,
    pub repetition_convention: RepetitionConvention,
    pub no_repeat_ngram: usize,
    pub length_decay_factor: f64,
    pub length_decay_start: usize,
    pub min_length: usize,
    /// Defaults to `min_length + 256`.
    pub max_length: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            temperature: 0.8,
            top_k: 10,
            repetition_penalty: 0.7,
            repetition_convention: RepetitionConvention::Discount,
            no_repeat_ngram: 3,
            length_decay_factor: 1.7,
            length_decay_start: 20,
            min_length: 750,
            max_length: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn resolved_max_length(&self) -> usize {
        self.max_length.unwrap_or(self.min_length + 256)
    }

    /// The same config with `max_length` filled in, as stored in records.
    pub fn resolved(&self) -> Self {
        Self {
            max_length: Some(self.resolved_max_length()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.beam_size == 0 {
            bad.push("beam_size must be at least 1");
        }
        if self.top_k == 0 {
            bad.push("top_k must be at least 1");
        }
        if self.no_repeat_ngram < 2 {
            bad.push("no_repeat_ngram must be at least 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad.push("temperature must be positive");
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            bad.push("repetition_penalty must be positive");
        }
        if !(self.length_decay_factor >= 1.0 && self.length_decay_factor.is_finite()) {
            bad.push("length_decay_factor must be at least 1");
        }
        if self.resolved_max_length() == 0 {
            bad.push("max_length must be positive");
        }
        if !bad.is_empty() {
            return Err(Error::config(bad.join("; ")));
        }
        if self.resolved_max_length() < self.min_length {
            tracing::warn!(
                min_length = self.min_length,
                max_length = self.resolved_max_length(),
                "max_length is below min_length; no beam can finish"
            );
        }
        Ok(())
    }
}

/// Decoding backend for a styled LM with a visual prefix already in the cache.
pub struct LmBackend<'a> {
    model: &'a StyledLanguageModel,
    prefix: Tensor,
}

impl<'a> LmBackend<'a> {
    pub fn new(model: &'a StyledLanguageModel, prefix: &VisualPrefix) -> Result<Self> {
        let base = model.base();
        let (len, dim) = prefix.shape();
        if dim != base.hidden_dim() {
            return Err(Error::config(format!(
                "visual prefix width {dim} does not match LM embedding width {}",
                base.hidden_dim()
            )));
        }
        if len == 0 {
            return Err(Error::config("visual prefix is empty"));
        }
        Ok(Self {
            model,
            prefix: prefix.to_tensor(base.dtype(), base.device())?,
        })
    }
}

fn rows_f64(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(logits.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

impl DecodeBackend for LmBackend<'_> {
    type State = KvCache;

    fn vocab_size(&self) -> usize {
        self.model.base().config().vocab_size
    }

    fn start(&self) -> Result<(Vec<f64>, KvCache)> {
        let (logits, cache) = self.model.prefill(&self.prefix)?;
        let mut rows = rows_f64(&logits)?;
        Ok((rows.remove(0), cache))
    }

    fn step(&self, state: &KvCache, parents: &[usize], tokens: &[u32]) -> Result<(Vec<Vec<f64>>, KvCache)> {
        let cache = state.select(parents)?;
        let (logits, cache) = self.model.decode_step(tokens, &cache)?;
        Ok((rows_f64(&logits)?, cache))
    }
}

/// Runs constrained beam search from `prefix` through `model`.
pub fn generate(prefix: &VisualPrefix, model: &StyledLanguageModel, cfg: &DecodeConfig, eos: u32) -> Result<BeamOutcome> {
    cfg.validate()?;
    let window = model.base().config().n_positions;
    let needed = prefix.shape().0 + cfg.resolved_max_length();
    if needed > window {
        return Err(Error::config(format!(
            "prefix plus max_length needs {needed} positions but the LM window is {window}"
        )));
    }
    let backend = LmBackend::new(model, prefix)?;
    beam_search(&backend, cfg, eos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub image_ref: String,
    pub style: String,
    pub story: String,
    pub token_count: usize,
    pub token_ids: Vec<u32>,
    pub finished: bool,
    pub score: f64,
    pub config: DecodeConfig,
    pub seed: u64,
    pub model_manifest: BTreeMap<String, String>,
    /// Set when the image could not be processed; the story is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationRecord {
    /// `token_ids` and `token_count` exclude the terminating EOS.
    pub fn from_outcome(
        image_ref: &str,
        style: &str,
        outcome: &BeamOutcome,
        tokenizer: &WordTokenizer,
        cfg: &DecodeConfig,
        model_manifest: BTreeMap<String, String>,
    ) -> Self {
        let ids = outcome.content_tokens(tokenizer.eos_id()).to_vec();
        Self {
            image_ref: image_ref.to_string(),
            style: style.to_string(),
            story: tokenizer.decode(&ids),
            token_count: ids.len(),
            token_ids: ids,
            finished: outcome.best.finished,
            score: outcome.best.cumulative_log_prob,
            config: cfg.resolved(),
            seed: cfg.seed,
            model_manifest,
            error: None,
        }
    }

    pub fn failed(image_ref: &str, style: &str, cfg: &DecodeConfig, model_manifest: BTreeMap<String, String>, error: String) -> Self {
        Self {
            image_ref: image_ref.to_string(),
            style: style.to_string(),
            story: String::new(),
            token_count: 0,
            token_ids: Vec::new(),
            finished: false,
            score: 0.0,
            config: cfg.resolved(),
            seed: cfg.seed,
            model_manifest,
            error: Some(error),
        }
    }
}

/// Per-record timing, kept apart from the records so they stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationTiming {
    pub image_ref: String,
    pub wall_time_s: f64,
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<usize> {
    crate::io::write_jsonl(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    crate::io::read_jsonl(path)
}
