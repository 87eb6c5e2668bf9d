//! Residual style adapters on top of each transformer layer, and the views that compose
//! them with a frozen base LM.
//!
//! Each block computes `h + up(act(down(layernorm(h))))` position-wise on a layer's
//! output. Up-projections start at zero so a fresh adapter set is the identity.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::lm::{KvCache, LayerHook, TransformerLm};
use crate::nn::{affine, layer_norm, tensor_checksum, Activation, Init};
use crate::training::{fit, masked_lm_loss, LmBatch, LoopConfig, LossLog};

const ADAPTER_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    ZeroUpProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_init")]
    pub init: AdapterInit,
}

fn default_activation() -> Activation {
    Activation::Relu
}
fn default_init() -> AdapterInit {
    AdapterInit::ZeroUpProjection
}

impl AdapterConfig {
    /// Bottleneck of `hidden / 8` with a rectifier.
    pub fn for_hidden(hidden: usize) -> Self {
        Self {
            bottleneck_dim: (hidden / 8).max(1),
            activation: default_activation(),
            init: default_init(),
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= hidden {
            return Err(Error::config(format!(
                "adapter bottleneck {} must lie in [1, {hidden})",
                self.bottleneck_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self, hidden: usize, layers: usize) -> usize {
        let b = self.bottleneck_dim;
        layers * (2 * hidden + hidden * b + b + b * hidden + hidden)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `[hidden, bottleneck]`
    pub down_proj: Tensor,
    pub down_bias: Tensor,
    /// `[bottleneck, hidden]`
    pub up_proj: Tensor,
    pub up_bias: Tensor,
    pub activation: Activation,
}

const BLOCK_PARAMS: [&str; 6] = ["ln.weight", "ln.bias", "down.weight", "down.bias", "up.weight", "up.bias"];

impl AdapterBlock {
    fn tensors(&self) -> [&Tensor; 6] {
        [&self.ln_gain, &self.ln_bias, &self.down_proj, &self.down_bias, &self.up_proj, &self.up_bias]
    }

    /// Applies the block to the last dimension of `h`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let normed = layer_norm(h, &self.ln_gain, &self.ln_bias, ADAPTER_LN_EPS)?;
        let z = self.activation.apply(&affine(&normed, &self.down_proj, &self.down_bias)?)?;
        let delta = affine(&z, &self.up_proj, &self.up_bias)?;
        Ok((h + delta)?)
    }
}

/// Adapter forward on a single hidden-state vector.
pub fn adapter_forward(h: &[f32], block: &AdapterBlock) -> Result<Vec<f32>> {
    let dtype = block.ln_gain.dtype();
    let x = Tensor::from_vec(h.to_vec(), (1, h.len()), block.ln_gain.device())?.to_dtype(dtype)?;
    let out = block.forward(&x)?;
    crate::nn::to_f32_vec(&out)
}

/// One adapter block per transformer layer, trained for one style.
#[derive(Debug, Clone)]
pub struct StyleAdapterSet {
    pub style_id: String,
    pub config: AdapterConfig,
    pub blocks: Vec<AdapterBlock>,
    pub lm_fingerprint: String,
}

impl StyleAdapterSet {
    /// Fresh set for `lm`: unit layer-norm gains, fan-in uniform down-projections, zero
    /// up-projections.
    pub fn init(style_id: &str, config: AdapterConfig, lm: &TransformerLm, seed: u64) -> Result<Self> {
        let hidden = lm.hidden_dim();
        config.validate(hidden)?;
        let mut init = Init::new(seed, lm.dtype(), lm.device().clone());
        let b = config.bottleneck_dim;
        let blocks = (0..lm.n_layer())
            .map(|_| {
                Ok(AdapterBlock {
                    ln_gain: init.constant(&[hidden], 1.0)?,
                    ln_bias: init.constant(&[hidden], 0.0)?,
                    down_proj: init.fan_in_uniform(&[hidden, b], hidden)?,
                    down_bias: init.constant(&[b], 0.0)?,
                    up_proj: init.constant(&[b, hidden], 0.0)?,
                    up_bias: init.constant(&[hidden], 0.0)?,
                    activation: config.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            style_id: style_id.to_string(),
            config,
            blocks,
            lm_fingerprint: lm.fingerprint()?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                BLOCK_PARAMS
                    .iter()
                    .zip(b.tensors())
                    .map(move |(n, t)| (format!("adapter.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.elem_count()).sum()
    }

    pub fn checksum(&self) -> Result<String> {
        let named = self.named_params();
        tensor_checksum(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_named(
        style_id: &str,
        config: AdapterConfig,
        lm_fingerprint: &str,
        layers: usize,
        mut params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| {
                let mut take = |n: &str| {
                    params
                        .remove(&format!("adapter.{i}.{n}"))
                        .ok_or_else(|| Error::config(format!("missing adapter parameter `adapter.{i}.{n}`")))
                };
                Ok(AdapterBlock {
                    ln_gain: take("ln.weight")?,
                    ln_bias: take("ln.bias")?,
                    down_proj: take("down.weight")?,
                    down_bias: take("down.bias")?,
                    up_proj: take("up.weight")?,
                    up_bias: take("up.bias")?,
                    activation: config.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = params.keys().next() {
            return Err(Error::config(format!("unexpected adapter parameter `{extra}`")));
        }
        Ok(Self {
            style_id: style_id.to_string(),
            config,
            blocks,
            lm_fingerprint: lm_fingerprint.to_string(),
        })
    }

    fn map_params(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let map = self
            .named_params()
            .into_iter()
            .map(|(n, t)| Ok((n, f(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_named(&self.style_id, self.config.clone(), &self.lm_fingerprint, self.blocks.len(), map)
    }

    pub fn trainable(&self) -> Result<(Self, Vec<Var>)> {
        let mut vars = Vec::new();
        let set = self.map_params(|t| {
            let v = Var::from_tensor(t)?;
            let out = v.as_tensor().clone();
            vars.push(v);
            Ok(out)
        })?;
        Ok((set, vars))
    }

    pub fn frozen_copy(&self) -> Result<Self> {
        self.map_params(|t| Ok(t.detach().copy()?))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        self.map_params(|t| Ok(t.to_dtype(dtype)?))
    }
}

impl LayerHook for StyleAdapterSet {
    fn after_layer(&self, layer: usize, hidden: &Tensor) -> Result<Tensor> {
        match self.blocks.get(layer) {
            Some(block) => block.forward(hidden),
            None => Ok(hidden.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    Plain,
    Adapter,
    FullFinetune,
}

/// Label used in generation records for the non-adapter variants.
pub const NON_STYLED: &str = "non-styled";
pub const PLAIN: &str = "plain";

/// A read-only view of a base LM, optionally steered by one style's adapters. Cheap to
/// clone; the underlying weights are shared.
#[derive(Debug, Clone)]
pub struct StyledLanguageModel {
    base: Arc<TransformerLm>,
    adapters: Option<Arc<StyleAdapterSet>>,
    mode: StyleMode,
}

impl StyledLanguageModel {
    pub fn plain(base: Arc<TransformerLm>) -> Self {
        Self {
            base,
            adapters: None,
            mode: StyleMode::Plain,
        }
    }

    /// An LM fine-tuned on the whole book collection, used without adapters.
    pub fn full_finetune(lm: Arc<TransformerLm>) -> Self {
        Self {
            base: lm,
            adapters: None,
            mode: StyleMode::FullFinetune,
        }
    }

    pub fn attach(base: Arc<TransformerLm>, adapters: Arc<StyleAdapterSet>) -> Result<Self> {
        let fp = base.fingerprint()?;
        if adapters.lm_fingerprint != fp {
            return Err(Error::Compatibility(format!(
                "adapter set `{}` was trained against LM {} but the base LM is {}",
                adapters.style_id,
                short(&adapters.lm_fingerprint),
                short(&fp)
            )));
        }
        if adapters.blocks.len() != base.n_layer() {
            return Err(Error::Compatibility(format!(
                "adapter set has {} blocks for an LM with {} layers",
                adapters.blocks.len(),
                base.n_layer()
            )));
        }
        Ok(Self {
            base,
            adapters: Some(adapters),
            mode: StyleMode::Adapter,
        })
    }

    pub fn detach(&self) -> Self {
        Self::plain(self.base.clone())
    }

    pub fn mode(&self) -> StyleMode {
        self.mode
    }

    pub fn base(&self) -> &TransformerLm {
        &self.base
    }

    pub fn adapters(&self) -> Option<&StyleAdapterSet> {
        self.adapters.as_deref()
    }

    /// `style_id`, `non-styled` or `plain`.
    pub fn style_label(&self) -> String {
        match (&self.adapters, self.mode) {
            (Some(a), _) => a.style_id.clone(),
            (None, StyleMode::FullFinetune) => NON_STYLED.to_string(),
            _ => PLAIN.to_string(),
        }
    }

    fn hook(&self) -> Option<&dyn LayerHook> {
        self.adapters.as_deref().map(|a| a as &dyn LayerHook)
    }

    pub fn forward_embeds(&self, embeds: &Tensor) -> Result<Tensor> {
        self.base.forward_embeds(embeds, self.hook())
    }

    pub fn forward_ids(&self, ids: &Tensor) -> Result<Tensor> {
        self.base.forward_ids(ids, self.hook())
    }

    pub fn prefill(&self, embeds: &Tensor) -> Result<(Tensor, KvCache)> {
        self.base.prefill(embeds, self.hook())
    }

    pub fn decode_step(&self, tokens: &[u32], cache: &KvCache) -> Result<(Tensor, KvCache)> {
        self.base.decode_step(tokens, cache, self.hook())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterTrainConfig {
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
    /// Epochs without validation improvement before stopping; `None` (written as 0)
    /// disables.
    #[serde(default = "default_patience", with = "patience_serde")]
    pub patience: Option<usize>,
}

pub(crate) mod patience_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        Ok(Option::<usize>::deserialize(d)?.filter(|&n| n > 0))
    }
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
fn default_patience() -> Option<usize> {
    Some(2)
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_seq_len: default_max_seq(),
            seed: 0,
            patience: default_patience(),
        }
    }
}

/// `[eos] + tokens + [eos]`, truncated to `max_seq_len`.
pub fn passage_sequence(tokens: &[u32], eos: u32, max_seq_len: usize) -> Vec<u32> {
    let mut seq = Vec::with_capacity(tokens.len() + 2);
    seq.push(eos);
    seq.extend_from_slice(tokens);
    seq.push(eos);
    seq.truncate(max_seq_len.max(2));
    seq
}

fn lm_batch_loss(lm: &TransformerLm, hook: Option<&dyn LayerHook>, seqs: &[&[u32]], eos: u32) -> Result<Tensor> {
    let batch = LmBatch::new(seqs, eos, lm.device())?;
    let logits = lm.forward_ids(&batch.inputs, hook)?;
    masked_lm_loss(&logits, &batch.targets, &batch.mask)
}

/// Token-weighted mean negative log-likelihood and token count over `seqs`.
pub fn mean_nll(model: &StyledLanguageModel, seqs: &[Vec<u32>], eos: u32, batch_size: usize) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = LmBatch::new(&refs, eos, model.base().device())?;
        let logits = model.forward_ids(&batch.inputs)?;
        let logp = candle_nn::ops::log_softmax(&logits, candle_core::D::Minus1)?;
        let picked = logp.gather(&batch.targets.unsqueeze(2)?, 2)?.squeeze(2)?;
        let mask = batch.mask.to_dtype(picked.dtype())?;
        let s = (picked.neg()? * &mask)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += s;
        count += batch.mask.sum_all()?.to_scalar::<f32>()? as usize;
    }
    if count == 0 {
        return Err(Error::config("no tokens to score"));
    }
    Ok((total / count as f64, count))
}

pub fn perplexity(model: &StyledLanguageModel, seqs: &[Vec<u32>], eos: u32) -> Result<f64> {
    Ok(mean_nll(model, seqs, eos, 16)?.0.exp())
}

fn loop_config(cfg: &AdapterTrainConfig, has_val: bool) -> LoopConfig {
    LoopConfig {
        epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        patience: if has_val { cfg.patience } else { None },
    }
}

/// Trains one style's adapters on token sequences (see [`passage_sequence`]) with the
/// base LM frozen. `validation`, when given, drives early stopping.
pub fn train_adapter(
    style_id: &str,
    train: &[Vec<u32>],
    validation: Option<&[Vec<u32>]>,
    base: &TransformerLm,
    adapter_cfg: &AdapterConfig,
    cfg: &AdapterTrainConfig,
    eos: u32,
) -> Result<(StyleAdapterSet, LossLog)> {
    if train.is_empty() {
        return Err(Error::config(format!("no training passages for style `{style_id}`")));
    }
    let frozen = base.frozen_copy()?;
    let init = StyleAdapterSet::init(style_id, adapter_cfg.clone(), &frozen, cfg.seed)?;
    let (trainable, vars) = init.trainable()?;
    let val_seqs = validation.filter(|v| !v.is_empty());
    let mut validate = || -> Result<f64> {
        let view = StyledLanguageModel {
            base: Arc::new(frozen.clone()),
            adapters: Some(Arc::new(trainable.clone())),
            mode: StyleMode::Adapter,
        };
        Ok(mean_nll(&view, val_seqs.unwrap_or_default(), eos, cfg.batch_size)?.0)
    };
    let val_fn: Option<&mut dyn FnMut() -> Result<f64>> = if val_seqs.is_some() { Some(&mut validate) } else { None };
    let log = fit(
        vars,
        train.len(),
        &loop_config(cfg, val_seqs.is_some()),
        |idx| {
            let seqs: Vec<&[u32]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            lm_batch_loss(&frozen, Some(&trainable), &seqs, eos)
        },
        val_fn,
    )?;
    Ok((trainable.frozen_copy()?, log))
}

/// Updates every LM parameter on the sequences (the non-styled variant). Also used to
/// pretrain a base LM from random initialization.
pub fn train_full_finetune(
    train: &[Vec<u32>],
    validation: Option<&[Vec<u32>]>,
    base: &TransformerLm,
    cfg: &AdapterTrainConfig,
    eos: u32,
) -> Result<(TransformerLm, LossLog)> {
    if train.is_empty() {
        return Err(Error::config("no training passages for fine-tuning"));
    }
    let (lm, vars) = base.trainable()?;
    let val_seqs = validation.filter(|v| !v.is_empty());
    let mut validate = || -> Result<f64> {
        let view = StyledLanguageModel::plain(Arc::new(lm.clone()));
        Ok(mean_nll(&view, val_seqs.unwrap_or_default(), eos, cfg.batch_size)?.0)
    };
    let val_fn: Option<&mut dyn FnMut() -> Result<f64>> = if val_seqs.is_some() { Some(&mut validate) } else { None };
    let log = if cfg.max_epochs == 0 {
        LossLog::default()
    } else {
        fit(
            vars,
            train.len(),
            &loop_config(cfg, val_seqs.is_some()),
            |idx| {
                let seqs: Vec<&[u32]> = idx.iter().map(|&i| train[i].as_slice()).collect();
                lm_batch_loss(&lm, None, &seqs, eos)
            },
            val_fn,
        )?
    };
    Ok((lm.frozen_copy()?, log))
}

pub const ADAPTER_WEIGHTS: &str = "adapters.safetensors";
pub const ADAPTER_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub style_id: String,
    pub adapter: AdapterConfig,
    pub lm_fingerprint: String,
    pub layers: usize,
    pub training: AdapterTrainConfig,
    pub data_fingerprint: String,
    pub final_loss: Option<f64>,
    pub loss_log: LossLog,
    pub checksum: String,
}

pub fn save_adapters(dir: &Path, set: &StyleAdapterSet, manifest: &AdapterManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: HashMap<String, Tensor> = set
        .named_params()
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&tensors, dir.join(ADAPTER_WEIGHTS))?;
    write_json(&dir.join(ADAPTER_MANIFEST), manifest)
}

pub fn load_adapters(dir: &Path, dtype: DType, device: &Device) -> Result<(StyleAdapterSet, AdapterManifest)> {
    let manifest: AdapterManifest = read_json(&dir.join(ADAPTER_MANIFEST))?;
    let path = dir.join(ADAPTER_WEIGHTS);
    let tensors = candle_core::safetensors::load(&path, device)
        .map_err(|e| Error::input(path.display().to_string(), e.to_string()))?;
    let map = tensors
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(dtype)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let set = StyleAdapterSet::from_named(
        &manifest.style_id,
        manifest.adapter.clone(),
        &manifest.lm_fingerprint,
        manifest.layers,
        map,
    )?;
    Ok((set, manifest))
}
