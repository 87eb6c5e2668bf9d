use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{LmConfig, TransformerLm};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::tokenizer::WordTokenizer;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmManifest {
    pub lm_id: String,
    pub config: LmConfig,
    pub fingerprint: String,
    /// Free-form training provenance (config, data fingerprint, losses).
    #[serde(default)]
    pub training: serde_json::Value,
}

/// Writes `weights.safetensors` (little-endian f32), `vocab.json` and `manifest.json`.
pub fn save_lm(
    dir: &Path,
    lm: &TransformerLm,
    tokenizer: &WordTokenizer,
    lm_id: &str,
    training: serde_json::Value,
) -> Result<LmManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: HashMap<String, Tensor> = lm
        .named_params()
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    tokenizer.save(&dir.join(VOCAB_FILE))?;
    let manifest = LmManifest {
        lm_id: lm_id.to_string(),
        config: lm.config().clone(),
        fingerprint: lm.fingerprint()?,
        training,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_lm(dir: &Path, dtype: DType, device: &Device) -> Result<(TransformerLm, WordTokenizer, LmManifest)> {
    let manifest: LmManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let weights = dir.join(WEIGHTS_FILE);
    let tensors = candle_core::safetensors::load(&weights, device)
        .map_err(|e| Error::input(weights.display().to_string(), e.to_string()))?;
    let map = tensors
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(dtype)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let lm = TransformerLm::from_named(manifest.config.clone(), map)?;
    let fp = lm.fingerprint()?;
    if fp != manifest.fingerprint {
        return Err(Error::Compatibility(format!(
            "LM weights in {} do not match manifest fingerprint",
            dir.display()
        )));
    }
    let tokenizer = WordTokenizer::load(&dir.join(VOCAB_FILE))?;
    if tokenizer.vocab_size() != manifest.config.vocab_size {
        return Err(Error::Compatibility(format!(
            "vocabulary has {} entries but LM expects {}",
            tokenizer.vocab_size(),
            manifest.config.vocab_size
        )));
    }
    Ok((lm, tokenizer, manifest))
}
