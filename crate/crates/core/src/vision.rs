//! Frozen image–text encoders producing embeddings in a shared space.
//!
//! [`ContrastiveEncoder`] is the seam the rest of the pipeline depends on. The bundled
//! [`ConceptEncoder`] is a deterministic, parameter-free-at-runtime encoder whose image
//! and text towers both land in a small grounded concept space (colour mass for images,
//! colour words and hashed content words for text) followed by a fixed orthonormal
//! projection. It stands in for a pretrained checkpoint in tests and toy runs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, Fingerprint};
use crate::tokenizer::pre_tokenize;

macro_rules! embedding_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub vector: Vec<f32>,
            pub model_id: String,
            pub l2_normalized: bool,
        }

        impl $name {
            pub fn new(vector: Vec<f32>, model_id: impl Into<String>) -> Self {
                Self { vector, model_id: model_id.into(), l2_normalized: false }
            }

            pub fn dim(&self) -> usize {
                self.vector.len()
            }

            pub fn norm(&self) -> f64 {
                l2_norm(&self.vector)
            }

            pub fn normalized(&self) -> Self {
                let n = self.norm();
                let vector = if n > 0.0 {
                    self.vector.iter().map(|v| (*v as f64 / n) as f32).collect()
                } else {
                    self.vector.clone()
                };
                Self { vector, model_id: self.model_id.clone(), l2_normalized: true }
            }

            pub fn is_finite(&self) -> bool {
                self.vector.iter().all(|v| v.is_finite())
            }
        }
    };
}

embedding_type!(
    /// Image embedding.
    VisualEmbedding
);
embedding_type!(
    /// Text embedding from the same encoder's text tower.
    TextEmbedding
);

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    dot / (na * nb)
}

/// Image preprocessing recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub resize_shortest_side: u32,
    pub center_crop: u32,
    pub filter: String,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

pub trait ContrastiveEncoder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    /// Longest text (in encoder tokens) the text tower accepts; longer input is truncated.
    fn max_text_tokens(&self) -> usize;
    fn preprocessing(&self) -> Preprocessing;
    fn parameter_checksum(&self) -> String;
    fn encode_rgb(&self, image: &RgbImage) -> Result<Vec<f32>>;
    fn encode_text_tokens(&self, tokens: &[String]) -> Result<Vec<f32>>;

    fn encode_image(&self, path: &Path, image_ref: &str) -> Result<VisualEmbedding> {
        let img = image::open(path).map_err(|e| Error::input(image_ref, format!("cannot decode image: {e}")))?;
        let vector = self.encode_rgb(&img.to_rgb8())?;
        Ok(VisualEmbedding::new(vector, self.model_id()))
    }

    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        let mut tokens = pre_tokenize(text);
        if tokens.is_empty() {
            return Err(Error::input(truncate_ref(text), "empty text"));
        }
        tokens.truncate(self.max_text_tokens());
        let vector = self.encode_text_tokens(&tokens)?;
        Ok(TextEmbedding::new(vector, self.model_id()))
    }

    /// Number of encoder tokens of `text` that fit the window.
    fn text_window_usage(&self, text: &str) -> (usize, usize) {
        let n = pre_tokenize(text).len();
        (n.min(self.max_text_tokens()), n)
    }
}

fn truncate_ref(text: &str) -> String {
    text.chars().take(40).collect()
}

struct PaletteColor {
    name: &'static str,
    rgb: [f32; 3],
    synonyms: &'static [&'static str],
}

const PALETTE: [PaletteColor; 8] = [
    PaletteColor { name: "red", rgb: [220.0, 30.0, 30.0], synonyms: &["crimson", "scarlet"] },
    PaletteColor { name: "green", rgb: [30.0, 180.0, 40.0], synonyms: &["emerald"] },
    PaletteColor { name: "blue", rgb: [30.0, 60.0, 220.0], synonyms: &["navy", "azure"] },
    PaletteColor { name: "yellow", rgb: [235.0, 220.0, 40.0], synonyms: &["golden"] },
    PaletteColor { name: "white", rgb: [245.0, 245.0, 245.0], synonyms: &["snowy"] },
    PaletteColor { name: "black", rgb: [15.0, 15.0, 15.0], synonyms: &["dark"] },
    PaletteColor { name: "orange", rgb: [240.0, 140.0, 20.0], synonyms: &["amber"] },
    PaletteColor { name: "purple", rgb: [130.0, 40.0, 170.0], synonyms: &["violet"] },
];

pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "white", "black", "orange", "purple"];

pub fn palette_rgb(color: &str) -> Option<[u8; 3]> {
    PALETTE
        .iter()
        .find(|c| c.name == color)
        .map(|c| [c.rgb[0] as u8, c.rgb[1] as u8, c.rgb[2] as u8])
}

const HASH_DIMS: usize = 16;
const CONCEPT_DIMS: usize = PALETTE.len() + 1 + HASH_DIMS;
const BIAS_WEIGHT: f32 = 0.5;
const HASHED_WORD_WEIGHT: f32 = 0.25;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEncoderConfig {
    pub embed_dim: usize,
    pub seed: u64,
    pub image_size: u32,
    pub max_text_tokens: usize,
}

impl Default for ConceptEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            seed: 0,
            image_size: 64,
            max_text_tokens: 77,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConceptEncoder {
    cfg: ConceptEncoderConfig,
    model_id: String,
    /// `embed_dim × CONCEPT_DIMS`, orthonormal columns, row-major.
    projection: Vec<f32>,
}

impl ConceptEncoder {
    pub fn new(cfg: ConceptEncoderConfig) -> Result<Self> {
        if cfg.embed_dim < CONCEPT_DIMS {
            return Err(Error::config(format!(
                "concept encoder needs embed_dim >= {CONCEPT_DIMS}, got {}",
                cfg.embed_dim
            )));
        }
        if cfg.image_size == 0 || cfg.max_text_tokens == 0 {
            return Err(Error::config("concept encoder sizes must be positive"));
        }
        let projection = orthonormal_columns(cfg.embed_dim, CONCEPT_DIMS, cfg.seed);
        let model_id = format!("toy-concept-d{}-s{}", cfg.embed_dim, cfg.seed);
        Ok(Self {
            cfg,
            model_id,
            projection,
        })
    }

    /// Parses ids produced by [`ConceptEncoder::model_id`], e.g. `toy-concept-d64-s0`.
    pub fn from_model_id(model_id: &str) -> Result<Self> {
        let bad = || Error::config(format!("unrecognized encoder model id `{model_id}`"));
        let rest = model_id.strip_prefix("toy-concept-d").ok_or_else(bad)?;
        let (dim, seed) = rest.split_once("-s").ok_or_else(bad)?;
        Self::new(ConceptEncoderConfig {
            embed_dim: dim.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
            ..Default::default()
        })
    }

    fn project(&self, concept: &[f32; CONCEPT_DIMS]) -> Vec<f32> {
        (0..self.cfg.embed_dim)
            .map(|r| {
                let row = &self.projection[r * CONCEPT_DIMS..(r + 1) * CONCEPT_DIMS];
                row.iter().zip(concept).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn preprocess(&self, img: &RgbImage) -> RgbImage {
        let size = self.cfg.image_size;
        let (w, h) = img.dimensions();
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(size);
        let nh = ((h as f64 * scale).round() as u32).max(size);
        let resized = image::imageops::resize(img, nw, nh, FilterType::Triangle);
        let x = (nw - size) / 2;
        let y = (nh - size) / 2;
        image::imageops::crop_imm(&resized, x, y, size, size).to_image()
    }
}

fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut out = vec![0f32; rows * cols];
    for (c, col) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + c] = col[r] as f32;
        }
    }
    out
}

impl ContrastiveEncoder for ConceptEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn max_text_tokens(&self) -> usize {
        self.cfg.max_text_tokens
    }

    fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            resize_shortest_side: self.cfg.image_size,
            center_crop: self.cfg.image_size,
            filter: "triangle".into(),
            channel_mean: [0.0; 3],
            channel_std: [1.0; 3],
        }
    }

    fn parameter_checksum(&self) -> String {
        let bytes: Vec<u8> = self.projection.iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    fn encode_rgb(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::input("<image>", "empty raster"));
        }
        let img = self.preprocess(image);
        let mut concept = [0f32; CONCEPT_DIMS];
        let total = (img.width() * img.height()) as f32;
        for px in img.pixels() {
            let p = [px[0] as f32, px[1] as f32, px[2] as f32];
            let nearest = PALETTE
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d: f32 = c.rgb.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
                    (i, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            concept[nearest] += 1.0 / total;
        }
        concept[PALETTE.len()] = BIAS_WEIGHT;
        Ok(self.project(&concept))
    }

    fn encode_text_tokens(&self, tokens: &[String]) -> Result<Vec<f32>> {
        let mut concept = [0f32; CONCEPT_DIMS];
        let mut color_mass = 0f32;
        for tok in tokens {
            let color = PALETTE
                .iter()
                .position(|c| c.name == tok || c.synonyms.contains(&tok.as_str()));
            match color {
                Some(i) => {
                    concept[i] += 1.0;
                    color_mass += 1.0;
                }
                None if tok.chars().any(char::is_alphanumeric) => {
                    let slot = PALETTE.len() + 1 + (fnv1a(tok) % HASH_DIMS as u64) as usize;
                    concept[slot] += HASHED_WORD_WEIGHT;
                }
                None => {}
            }
        }
        if color_mass > 0.0 {
            concept[..PALETTE.len()].iter_mut().for_each(|v| *v /= color_mass);
        }
        let hashed_norm = concept[PALETTE.len() + 1..].iter().map(|v| v * v).sum::<f32>().sqrt();
        if hashed_norm > HASHED_WORD_WEIGHT * 2.0 {
            let s = HASHED_WORD_WEIGHT * 2.0 / hashed_norm;
            concept[PALETTE.len() + 1..].iter_mut().for_each(|v| *v *= s);
        }
        concept[PALETTE.len()] = BIAS_WEIGHT;
        Ok(self.project(&concept))
    }
}

/// Cache key for an image reference.
pub fn image_key(image_ref: &str) -> String {
    format!("image:{image_ref}")
}

/// Cache key for a text (SHA-256 of its UTF-8 bytes).
pub fn text_key(text: &str) -> String {
    format!("text:{}", sha256_hex(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedVector {
    pub model_id: String,
    pub vector: Vec<f32>,
}

const CACHE_MAGIC: &[u8; 8] = b"PPSTEMB1";

/// Persistent embedding store. On disk: an 8-byte magic followed by records of
/// `u32 key_len, key, u32 model_len, model_id, u32 dim, dim × f32`, all little-endian.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, CachedVector>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str, model_id: &str) -> Option<&[f32]> {
        self.entries
            .get(key)
            .filter(|e| e.model_id == model_id)
            .map(|e| e.vector.as_slice())
    }

    pub fn insert(&mut self, key: String, model_id: &str, vector: Vec<f32>) {
        self.entries.insert(
            key,
            CachedVector {
                model_id: model_id.to_string(),
                vector,
            },
        );
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CACHE_MAGIC.to_vec();
        for (key, e) in &self.entries {
            for s in [key.as_str(), e.model_id.as_str()] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.extend_from_slice(&(e.vector.len() as u32).to_le_bytes());
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |m: &str| Error::input(name, format!("corrupt embedding cache: {m}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        fn read_u32(r: &mut &[u8]) -> Option<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).ok()?;
            Some(u32::from_le_bytes(b))
        }
        fn read_str(r: &mut &[u8]) -> Option<String> {
            let n = read_u32(r)? as usize;
            if r.len() < n {
                return None;
            }
            let (s, rest) = r.split_at(n);
            *r = rest;
            String::from_utf8(s.to_vec()).ok()
        }
        let mut cache = EmbeddingCache::new();
        while !r.is_empty() {
            let key = read_str(&mut r).ok_or_else(|| bad("bad key"))?;
            let model_id = read_str(&mut r).ok_or_else(|| bad("bad model id"))?;
            let dim = read_u32(&mut r).ok_or_else(|| bad("bad dim"))? as usize;
            if r.len() < dim * 4 {
                return Err(bad("truncated vector"));
            }
            let (vals, rest) = r.split_at(dim * 4);
            r = rest;
            let vector = vals
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.entries.insert(key, CachedVector { model_id, vector });
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Encodes an image through the cache.
    pub fn image(
        &mut self,
        encoder: &dyn ContrastiveEncoder,
        path: &Path,
        image_ref: &str,
    ) -> Result<VisualEmbedding> {
        let key = image_key(image_ref);
        if let Some(v) = self.get(&key, encoder.model_id()) {
            return Ok(VisualEmbedding::new(v.to_vec(), encoder.model_id()));
        }
        let emb = encoder.encode_image(path, image_ref)?;
        self.insert(key, encoder.model_id(), emb.vector.clone());
        Ok(emb)
    }

    pub fn text(&mut self, encoder: &dyn ContrastiveEncoder, text: &str) -> Result<TextEmbedding> {
        let key = text_key(text);
        if let Some(v) = self.get(&key, encoder.model_id()) {
            return Ok(TextEmbedding::new(v.to_vec(), encoder.model_id()));
        }
        let emb = encoder.encode_text(text)?;
        self.insert(key, encoder.model_id(), emb.vector.clone());
        Ok(emb)
    }
}

/// Path of an image reference relative to an image root.
pub fn resolve_image(root: &Path, image_ref: &str) -> PathBuf {
    root.join(image_ref)
}

/// Fingerprint of an encoder's identity and weights.
pub fn encoder_fingerprint(encoder: &dyn ContrastiveEncoder) -> String {
    Fingerprint::new()
        .update(encoder.model_id())
        .update(encoder.parameter_checksum())
        .finish()
}
