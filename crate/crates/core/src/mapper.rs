//! The mapping network that turns an image embedding into a fixed-length prefix of
//! vectors in the language model's input-embedding space.
//!
//! Architecture: `input_dim → hidden_dim → act → prefix_length · lm_embed_dim`, reshaped
//! row-major into `prefix_length` rows. Training keeps the LM frozen and minimises
//! next-token cross-entropy on caption tokens following the prefix.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::lm::TransformerLm;
use crate::nn::{affine, tensor_checksum, to_f32_vec, Activation, Init};
use crate::training::{fit, masked_lm_loss, LoopConfig, LossLog};
use crate::vision::VisualEmbedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_prefix_length")]
    pub prefix_length: usize,
    pub lm_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> usize {
    512
}
fn default_prefix_length() -> usize {
    10
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl MapperConfig {
    pub fn new(input_dim: usize, lm_embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: default_hidden(),
            prefix_length: default_prefix_length(),
            lm_embed_dim,
            activation: default_activation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.prefix_length == 0 || self.lm_embed_dim == 0 {
            return Err(Error::config(format!("mapper dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperTrainConfig {
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_max_seq() -> usize {
    512
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_seq_len: default_max_seq(),
            seed: 0,
        }
    }
}

impl MapperTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.max_seq_len == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("mapper training values must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `prefix_length × lm_embed_dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrefix {
    pub prefix_length: usize,
    pub embed_dim: usize,
    pub values: Vec<f32>,
}

impl VisualPrefix {
    pub fn new(prefix_length: usize, embed_dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != prefix_length * embed_dim {
            return Err(Error::config(format!(
                "prefix of {} values cannot be shaped {prefix_length}×{embed_dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("visual prefix contains non-finite values".into()));
        }
        Ok(Self {
            prefix_length,
            embed_dim,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prefix_length, self.embed_dim)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    /// `[1, prefix_length, embed_dim]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.prefix_length, self.embed_dim), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone)]
pub struct PrefixMapper {
    cfg: MapperConfig,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

const PARAM_NAMES: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

impl PrefixMapper {
    /// Fan-in scaled uniform initialization.
    pub fn init(cfg: MapperConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed, dtype, device.clone());
        let out = cfg.prefix_length * cfg.lm_embed_dim;
        let w1 = init.fan_in_uniform(&[cfg.input_dim, cfg.hidden_dim], cfg.input_dim)?;
        let b1 = init.fan_in_uniform(&[cfg.hidden_dim], cfg.input_dim)?;
        let w2 = init.fan_in_uniform(&[cfg.hidden_dim, out], cfg.hidden_dim)?;
        let b2 = init.fan_in_uniform(&[out], cfg.hidden_dim)?;
        Ok(Self { cfg, w1, b1, w2, b2 })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn named_params(&self) -> [(&'static str, &Tensor); 4] {
        [
            (PARAM_NAMES[0], &self.w1),
            (PARAM_NAMES[1], &self.b1),
            (PARAM_NAMES[2], &self.w2),
            (PARAM_NAMES[3], &self.b2),
        ]
    }

    pub fn from_named(cfg: MapperConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.prefix_length * cfg.lm_embed_dim;
        let shapes: [&[usize]; 4] = [&[cfg.input_dim, cfg.hidden_dim], &[cfg.hidden_dim], &[cfg.hidden_dim, out], &[out]];
        let mut take = |i: usize| -> Result<Tensor> {
            let t = params
                .remove(PARAM_NAMES[i])
                .ok_or_else(|| Error::config(format!("missing mapper parameter `{}`", PARAM_NAMES[i])))?;
            if t.dims() != shapes[i] {
                return Err(Error::config(format!(
                    "mapper parameter `{}` has shape {:?}, expected {:?}",
                    PARAM_NAMES[i],
                    t.dims(),
                    shapes[i]
                )));
            }
            Ok(t)
        };
        Ok(Self {
            w1: take(0)?,
            b1: take(1)?,
            w2: take(2)?,
            b2: take(3)?,
            cfg,
        })
    }

    fn map_params(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let map = self
            .named_params()
            .into_iter()
            .map(|(n, t)| Ok((n.to_string(), f(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_named(self.cfg.clone(), map)
    }

    pub fn trainable(&self) -> Result<(Self, Vec<Var>)> {
        let mut vars = Vec::new();
        let m = self.map_params(|t| {
            let v = Var::from_tensor(t)?;
            let out = v.as_tensor().clone();
            vars.push(v);
            Ok(out)
        })?;
        Ok((m, vars))
    }

    pub fn frozen_copy(&self) -> Result<Self> {
        self.map_params(|t| Ok(t.detach().copy()?))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        self.map_params(|t| Ok(t.to_dtype(dtype)?))
    }

    pub fn checksum(&self) -> Result<String> {
        tensor_checksum(self.named_params())
    }

    /// `[b, input_dim] → [b, prefix_length, lm_embed_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = x.dims2()?;
        if d != self.cfg.input_dim {
            return Err(Error::config(format!(
                "embedding dimension {d} does not match mapper input_dim {}",
                self.cfg.input_dim
            )));
        }
        let h = self.cfg.activation.apply(&affine(x, &self.w1, &self.b1)?)?;
        let out = affine(&h, &self.w2, &self.b2)?;
        Ok(out.reshape((b, self.cfg.prefix_length, self.cfg.lm_embed_dim))?)
    }

    pub fn map_prefix(&self, embedding: &VisualEmbedding) -> Result<VisualPrefix> {
        if embedding.dim() != self.cfg.input_dim {
            return Err(Error::config(format!(
                "embedding dimension {} does not match mapper input_dim {}",
                embedding.dim(),
                self.cfg.input_dim
            )));
        }
        let x = Tensor::from_vec(embedding.vector.clone(), (1, embedding.dim()), self.w1.device())?
            .to_dtype(self.w1.dtype())?;
        let out = self.forward(&x)?;
        VisualPrefix::new(self.cfg.prefix_length, self.cfg.lm_embed_dim, to_f32_vec(&out)?)
    }
}

/// One training example: an image embedding and the caption's token ids (end-of-text
/// included).
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub embedding: Vec<f32>,
    pub tokens: Vec<u32>,
}

/// Targets and mask aligned with the `prefix_length + tokens.len()` input positions.
/// Position `p` predicts the element at `p + 1`; positions inside the prefix carry
/// `prefix_label` and are masked out. The last position has no successor and is masked.
pub fn caption_targets(prefix_length: usize, tokens: &[u32], prefix_label: u32) -> (Vec<u32>, Vec<f32>) {
    let total = prefix_length + tokens.len();
    let mut targets = vec![prefix_label; total];
    let mut mask = vec![0f32; total];
    for (i, &tok) in tokens.iter().enumerate() {
        let p = prefix_length + i - 1;
        targets[p] = tok;
        mask[p] = 1.0;
    }
    (targets, mask)
}

/// Mean cross-entropy of captions conditioned on mapped prefixes. Sequences are
/// truncated so that prefix plus caption fit `max_seq_len`, then right-padded.
pub fn prefix_caption_loss(
    lm: &TransformerLm,
    mapper: &PrefixMapper,
    batch: &[&CaptionExample],
    max_seq_len: usize,
) -> Result<Tensor> {
    let device = lm.device();
    let dtype = lm.dtype();
    let plen = mapper.cfg.prefix_length;
    if max_seq_len <= plen {
        return Err(Error::config(format!(
            "max_seq_len {max_seq_len} must exceed prefix length {plen}"
        )));
    }
    let budget = max_seq_len - plen;
    let width = batch.iter().map(|e| e.tokens.len().min(budget)).max().unwrap_or(0);
    if width == 0 {
        return Err(Error::config("caption batch has no tokens"));
    }
    let b = batch.len();
    let emb: Vec<f32> = batch.iter().flat_map(|e| e.embedding.iter().copied()).collect();
    let emb = Tensor::from_vec(emb, (b, mapper.cfg.input_dim), device)?.to_dtype(dtype)?;
    let mut ids = vec![0u32; b * width];
    let mut targets = Vec::with_capacity(b * (plen + width));
    let mut mask = Vec::with_capacity(b * (plen + width));
    for (i, e) in batch.iter().enumerate() {
        let toks = &e.tokens[..e.tokens.len().min(budget)];
        ids[i * width..i * width + toks.len()].copy_from_slice(toks);
        let (mut t, mut m) = caption_targets(plen, toks, 0);
        t.resize(plen + width, 0);
        m.resize(plen + width, 0.0);
        targets.extend(t);
        mask.extend(m);
    }
    let prefix = mapper.forward(&emb)?;
    let tok_emb = lm.embed_tokens(&Tensor::from_vec(ids, (b, width), device)?)?;
    let input = Tensor::cat(&[&prefix, &tok_emb], 1)?;
    let logits = lm.forward_embeds(&input, None)?;
    let targets = Tensor::from_vec(targets, (b, plen + width), device)?;
    let mask = Tensor::from_vec(mask, (b, plen + width), device)?;
    masked_lm_loss(&logits, &targets, &mask)
}

/// Trains a fresh copy of `mapper` against the frozen `lm`. Only mapper parameters are
/// updated; the LM is used through a detached copy.
pub fn train_mapper(
    examples: &[CaptionExample],
    lm: &TransformerLm,
    mapper: &PrefixMapper,
    cfg: &MapperTrainConfig,
) -> Result<(PrefixMapper, LossLog)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::config("mapper training needs at least one image-caption pair"));
    }
    if mapper.cfg.lm_embed_dim != lm.hidden_dim() {
        return Err(Error::config(format!(
            "mapper emits width {} but the LM expects {}",
            mapper.cfg.lm_embed_dim,
            lm.hidden_dim()
        )));
    }
    if let Some(e) = examples.iter().find(|e| e.embedding.len() != mapper.cfg.input_dim) {
        return Err(Error::config(format!(
            "embedding dimension {} does not match mapper input_dim {}",
            e.embedding.len(),
            mapper.cfg.input_dim
        )));
    }
    let frozen = lm.frozen_copy()?;
    let (trainable, vars) = mapper.to_dtype(lm.dtype())?.trainable()?;
    let loop_cfg = LoopConfig {
        epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        patience: None,
    };
    let log = fit(
        vars,
        examples.len(),
        &loop_cfg,
        |idx| {
            let batch: Vec<&CaptionExample> = idx.iter().map(|&i| &examples[i]).collect();
            prefix_caption_loss(&frozen, &trainable, &batch, cfg.max_seq_len)
        },
        None,
    )?;
    Ok((trainable.frozen_copy()?, log))
}

pub const MAPPER_WEIGHTS: &str = "mapper.safetensors";
pub const MAPPER_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapperManifest {
    pub mapper: MapperConfig,
    pub training: MapperTrainConfig,
    pub encoder_model_id: String,
    pub lm_id: String,
    pub lm_fingerprint: String,
    pub data_fingerprint: String,
    pub final_loss: Option<f64>,
    pub loss_log: LossLog,
    pub checksum: String,
}

pub fn save_mapper(dir: &Path, mapper: &PrefixMapper, manifest: &MapperManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: HashMap<String, Tensor> = mapper
        .named_params()
        .into_iter()
        .map(|(n, t)| Ok((n.to_string(), t.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&tensors, dir.join(MAPPER_WEIGHTS))?;
    write_json(&dir.join(MAPPER_MANIFEST), manifest)
}

pub fn load_mapper(dir: &Path, dtype: DType, device: &Device) -> Result<(PrefixMapper, MapperManifest)> {
    let manifest: MapperManifest = read_json(&dir.join(MAPPER_MANIFEST))?;
    let path = dir.join(MAPPER_WEIGHTS);
    let tensors = candle_core::safetensors::load(&path, device)
        .map_err(|e| Error::input(path.display().to_string(), e.to_string()))?;
    let map = tensors
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(dtype)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((PrefixMapper::from_named(manifest.mapper.clone(), map)?, manifest))
}
