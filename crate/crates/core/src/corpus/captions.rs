use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCaptionPair {
    pub image_ref: String,
    #[serde(rename = "caption")]
    pub caption_text: String,
    pub split: Split,
}

impl ImageCaptionPair {
    pub fn new(image_ref: impl Into<String>, caption: impl Into<String>, split: Split) -> Result<Self> {
        let caption_text = caption.into().trim().to_string();
        let image_ref = image_ref.into();
        if caption_text.is_empty() {
            return Err(Error::input(image_ref, "empty caption"));
        }
        Ok(Self {
            image_ref,
            caption_text,
            split,
        })
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    caption: String,
}

/// Parses an MS-COCO style caption annotation file. Every (image, caption) annotation
/// becomes one pair, so images with several captions appear several times. Output is
/// ordered by annotation order.
pub fn load_coco_captions(path: &Path, split: Split) -> Result<Vec<ImageCaptionPair>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile =
        serde_json::from_str(&raw).map_err(|e| Error::input(path.display().to_string(), e.to_string()))?;
    let names: HashMap<u64, &str> = file.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
    let mut out = Vec::with_capacity(file.annotations.len());
    for ann in &file.annotations {
        let Some(name) = names.get(&ann.image_id) else {
            tracing::warn!(image_id = ann.image_id, "caption references unknown image; skipped");
            continue;
        };
        if ann.caption.trim().is_empty() {
            continue;
        }
        out.push(ImageCaptionPair::new(*name, ann.caption.as_str(), split)?);
    }
    Ok(out)
}

/// Returns `floor(fraction * n)` pairs drawn by a seeded permutation of the input order.
pub fn subsample(dataset: &[ImageCaptionPair], fraction: f64, seed: u64) -> Result<Vec<ImageCaptionPair>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    let take = (fraction * dataset.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx[..take].iter().map(|&i| dataset[i].clone()).collect())
}
