//! A GPT-2 style causal decoder: learned token and position embeddings, pre-norm
//! attention/MLP blocks, tied output head. Parameter names follow the GPT-2 layout
//! (`wte.weight`, `h.{i}.attn.c_attn.weight`, ...), with `[in, out]` projection weights.

mod checkpoint;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_lm, save_lm, LmManifest};

use crate::error::{Error, Result};
use crate::nn::{affine, layer_norm, tensor_checksum, Init};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_positions: usize,
    pub n_embd: usize,
    pub n_layer: usize,
    pub n_head: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl LmConfig {
    /// GPT-2 small (124M parameters).
    pub fn gpt2_small() -> Self {
        Self {
            vocab_size: 50257,
            n_positions: 1024,
            n_embd: 768,
            n_layer: 12,
            n_head: 12,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.n_positions == 0 || self.n_embd == 0 || self.n_layer == 0 || self.n_head == 0 {
            return Err(Error::config(format!("invalid LM dimensions: {self:?}")));
        }
        if self.n_embd % self.n_head != 0 {
            return Err(Error::config(format!(
                "n_embd {} not divisible by n_head {}",
                self.n_embd, self.n_head
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.n_embd;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        self.vocab_size * d + self.n_positions * d + self.n_layer * per_layer + 2 * d
    }
}

/// Per-layer transformation applied to each block's output (e.g. residual adapters).
pub trait LayerHook {
    fn after_layer(&self, layer: usize, hidden: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct Block {
    ln_1: (Tensor, Tensor),
    c_attn: (Tensor, Tensor),
    attn_proj: (Tensor, Tensor),
    ln_2: (Tensor, Tensor),
    c_fc: (Tensor, Tensor),
    mlp_proj: (Tensor, Tensor),
}

const BLOCK_PARAMS: [&str; 6] = ["ln_1", "attn.c_attn", "attn.c_proj", "ln_2", "mlp.c_fc", "mlp.c_proj"];

impl Block {
    fn parts(&self) -> [&(Tensor, Tensor); 6] {
        [&self.ln_1, &self.c_attn, &self.attn_proj, &self.ln_2, &self.c_fc, &self.mlp_proj]
    }
}

/// Cached keys and values per layer, shaped `[batch, heads, time, head_dim]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Gathers batch rows, e.g. to follow beam reordering.
    pub fn select(&self, rows: &[usize]) -> Result<KvCache> {
        let device = self.layers[0].0.device();
        let idx = Tensor::from_vec(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), rows.len(), device)?;
        let layers = self
            .layers
            .iter()
            .map(|(k, v)| Ok((k.index_select(&idx, 0)?, v.index_select(&idx, 0)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(KvCache { layers, len: self.len })
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLm {
    cfg: LmConfig,
    wte: Tensor,
    wpe: Tensor,
    blocks: Vec<Block>,
    ln_f: (Tensor, Tensor),
}

impl TransformerLm {
    /// Random initialization with GPT-2's scheme (N(0, 0.02), residual projections
    /// scaled by `1/sqrt(2 * n_layer)`).
    pub fn init(cfg: LmConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed, dtype, device.clone());
        let d = cfg.n_embd;
        let resid_std = 0.02 / (2.0 * cfg.n_layer as f64).sqrt();
        let wte = init.normal(&[cfg.vocab_size, d], 0.02)?;
        let wpe = init.normal(&[cfg.n_positions, d], 0.01)?;
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for _ in 0..cfg.n_layer {
            blocks.push(Block {
                ln_1: (init.constant(&[d], 1.0)?, init.constant(&[d], 0.0)?),
                c_attn: (init.normal(&[d, 3 * d], 0.02)?, init.constant(&[3 * d], 0.0)?),
                attn_proj: (init.normal(&[d, d], resid_std)?, init.constant(&[d], 0.0)?),
                ln_2: (init.constant(&[d], 1.0)?, init.constant(&[d], 0.0)?),
                c_fc: (init.normal(&[d, 4 * d], 0.02)?, init.constant(&[4 * d], 0.0)?),
                mlp_proj: (init.normal(&[4 * d, d], resid_std)?, init.constant(&[d], 0.0)?),
            });
        }
        let ln_f = (init.constant(&[d], 1.0)?, init.constant(&[d], 0.0)?);
        Ok(Self {
            cfg,
            wte,
            wpe,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        self.wte.device()
    }

    pub fn dtype(&self) -> DType {
        self.wte.dtype()
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.n_embd
    }

    pub fn n_layer(&self) -> usize {
        self.cfg.n_layer
    }

    /// Parameters in a stable order with GPT-2 names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte.weight".to_string(), &self.wte), ("wpe.weight".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, (w, bias)) in BLOCK_PARAMS.iter().zip(b.parts()) {
                out.push((format!("h.{i}.{name}.weight"), w));
                out.push((format!("h.{i}.{name}.bias"), bias));
            }
        }
        out.push(("ln_f.weight".to_string(), &self.ln_f.0));
        out.push(("ln_f.bias".to_string(), &self.ln_f.1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.elem_count()).sum()
    }

    pub fn from_named(cfg: LmConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = params
                .remove(&name)
                .ok_or_else(|| Error::config(format!("missing LM parameter `{name}`")))?;
            if t.dims() != shape {
                return Err(Error::config(format!(
                    "LM parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            Ok(t)
        };
        let d = cfg.n_embd;
        let wte = take("wte.weight".into(), &[cfg.vocab_size, d])?;
        let wpe = take("wpe.weight".into(), &[cfg.n_positions, d])?;
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for i in 0..cfg.n_layer {
            let mut pair = |name: &str, w: &[usize], b: &[usize]| -> Result<(Tensor, Tensor)> {
                Ok((take(format!("h.{i}.{name}.weight"), w)?, take(format!("h.{i}.{name}.bias"), b)?))
            };
            blocks.push(Block {
                ln_1: pair("ln_1", &[d], &[d])?,
                c_attn: pair("attn.c_attn", &[d, 3 * d], &[3 * d])?,
                attn_proj: pair("attn.c_proj", &[d, d], &[d])?,
                ln_2: pair("ln_2", &[d], &[d])?,
                c_fc: pair("mlp.c_fc", &[d, 4 * d], &[4 * d])?,
                mlp_proj: pair("mlp.c_proj", &[4 * d, d], &[d])?,
            });
        }
        let ln_f = (take("ln_f.weight".into(), &[d])?, take("ln_f.bias".into(), &[d])?);
        Ok(Self {
            cfg,
            wte,
            wpe,
            blocks,
            ln_f,
        })
    }

    fn map_params(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let map = self
            .named_params()
            .into_iter()
            .map(|(n, t)| Ok((n, f(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_named(self.cfg.clone(), map)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        self.map_params(|t| Ok(t.to_dtype(dtype)?))
    }

    /// A copy whose parameters are fresh trainable variables, plus those variables.
    pub fn trainable(&self) -> Result<(Self, Vec<Var>)> {
        let mut vars = Vec::new();
        let lm = self.map_params(|t| {
            let v = Var::from_tensor(t)?;
            let out = v.as_tensor().clone();
            vars.push(v);
            Ok(out)
        })?;
        Ok((lm, vars))
    }

    /// A copy detached from any autograd graph.
    pub fn frozen_copy(&self) -> Result<Self> {
        self.map_params(|t| Ok(t.detach().copy()?))
    }

    /// Checksum of every parameter's `f32` bytes; identifies an LM for adapter compatibility.
    pub fn fingerprint(&self) -> Result<String> {
        let named = self.named_params();
        tensor_checksum(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Token embeddings for `ids` of shape `[batch, time]`.
    pub fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self.wte.index_select(&flat, 0)?.reshape((b, t, self.cfg.n_embd))?)
    }

    fn check_positions(&self, start: usize, len: usize) -> Result<()> {
        if start + len > self.cfg.n_positions {
            return Err(Error::config(format!(
                "sequence of {} positions exceeds the LM window of {}",
                start + len,
                self.cfg.n_positions
            )));
        }
        Ok(())
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Tensor,
        past: Option<&(Tensor, Tensor)>,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, (Tensor, Tensor))> {
        let (b, t, d) = x.dims3()?;
        let heads = self.cfg.n_head;
        let hd = d / heads;
        let eps = self.cfg.layer_norm_eps;
        let h = layer_norm(x, &block.ln_1.0, &block.ln_1.1, eps)?;
        let qkv = affine(&h, &block.c_attn.0, &block.c_attn.1)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * d, d)?
                .reshape((b, t, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(0)?;
        let mut k = split(1)?;
        let mut v = split(2)?;
        if let Some((pk, pv)) = past {
            k = Tensor::cat(&[pk, &k], 2)?;
            v = Tensor::cat(&[pv, &v], 2)?;
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = mask {
            att = att.broadcast_add(mask)?;
        }
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        let y = affine(&y, &block.attn_proj.0, &block.attn_proj.1)?;
        let x = (x + y)?;
        let h = layer_norm(&x, &block.ln_2.0, &block.ln_2.1, eps)?;
        let h = affine(&h, &block.c_fc.0, &block.c_fc.1)?.gelu()?;
        let h = affine(&h, &block.mlp_proj.0, &block.mlp_proj.1)?;
        Ok(((x + h)?, (k, v)))
    }

    /// Additive causal mask `[t, past + t]`: query `i` sees keys `0..=past + i`.
    fn causal_mask(&self, t: usize, past: usize) -> Result<Tensor> {
        let total = past + t;
        let data: Vec<f32> = (0..t)
            .flat_map(|i| (0..total).map(move |j| if j <= past + i { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        Ok(Tensor::from_vec(data, (t, total), self.device())?.to_dtype(self.dtype())?)
    }

    fn run(
        &self,
        embeds: &Tensor,
        past: Option<&KvCache>,
        hook: Option<&dyn LayerHook>,
    ) -> Result<(Tensor, KvCache)> {
        let (_, t, d) = embeds.dims3()?;
        if d != self.cfg.n_embd {
            return Err(Error::config(format!(
                "input embedding width {d} does not match LM width {}",
                self.cfg.n_embd
            )));
        }
        let start = past.map_or(0, |p| p.len);
        self.check_positions(start, t)?;
        let pos = self.wpe.narrow(0, start, t)?;
        let mut x = embeds.broadcast_add(&pos)?;
        let mask = if t > 1 { Some(self.causal_mask(t, start)?) } else { None };
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, kv) = self.block_forward(block, &x, past.map(|p| &p.layers[i]), mask.as_ref())?;
            x = match hook {
                Some(h) => h.after_layer(i, &out)?,
                None => out,
            };
            layers.push(kv);
        }
        let x = layer_norm(&x, &self.ln_f.0, &self.ln_f.1, self.cfg.layer_norm_eps)?;
        Ok((x, KvCache { layers, len: start + t }))
    }

    fn head(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(hidden.broadcast_matmul(&self.wte.t()?)?)
    }

    /// Next-token logits `[batch, time, vocab]` for input embeddings `[batch, time, n_embd]`.
    pub fn forward_embeds(&self, embeds: &Tensor, hook: Option<&dyn LayerHook>) -> Result<Tensor> {
        let (hidden, _) = self.run(embeds, None, hook)?;
        self.head(&hidden)
    }

    pub fn forward_ids(&self, ids: &Tensor, hook: Option<&dyn LayerHook>) -> Result<Tensor> {
        self.forward_embeds(&self.embed_tokens(ids)?, hook)
    }

    /// Runs a prompt of embeddings and returns last-position logits `[batch, vocab]`
    /// with the filled cache.
    pub fn prefill(&self, embeds: &Tensor, hook: Option<&dyn LayerHook>) -> Result<(Tensor, KvCache)> {
        let (hidden, cache) = self.run(embeds, None, hook)?;
        let t = hidden.dim(1)?;
        let last = hidden.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok((self.head(&last)?, cache))
    }

    /// Feeds one token per batch row and returns logits `[batch, vocab]`.
    pub fn decode_step(&self, tokens: &[u32], cache: &KvCache, hook: Option<&dyn LayerHook>) -> Result<(Tensor, KvCache)> {
        let ids = Tensor::from_vec(tokens.to_vec(), (tokens.len(), 1), self.device())?;
        let embeds = self.embed_tokens(&ids)?;
        let (hidden, cache) = self.run(&embeds, Some(cache), hook)?;
        Ok((self.head(&hidden.squeeze(1)?)?, cache))
    }
}
