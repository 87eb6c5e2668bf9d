//! A small synthetic world for end-to-end runs without external data: two-colour
//! images with matching captions, and books in two styles whose content words do not
//! overlap.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::pre_tokenize;
use crate::vision::{palette_rgb, COLOR_NAMES};

pub const FUNCTION_WORDS: [&str; 10] = ["the", "a", "and", "he", "she", "they", "with", "in", "then", "was"];

struct StyleLexicon {
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
}

const ROMANCE: StyleLexicon = StyleLexicon {
    nouns: &["heart", "rose", "letter", "garden", "smile", "candle", "kiss", "promise", "dream", "wedding", "lover", "moonlight"],
    verbs: &["loved", "kissed", "embraced", "whispered", "adored", "cherished", "caressed", "treasured", "danced", "admired"],
    adjectives: &["tender", "gentle", "sweet", "velvet", "silken", "shy", "warm", "lovely"],
};

const ACTION: StyleLexicon = StyleLexicon {
    nouns: &["sword", "battle", "rifle", "soldier", "enemy", "fortress", "bullet", "tank", "cliff", "storm", "blade", "mission"],
    verbs: &["fought", "struck", "charged", "fired", "chased", "escaped", "ambushed", "crashed", "raided", "stormed"],
    adjectives: &["fierce", "brutal", "swift", "deadly", "armed", "burning", "grim", "savage"],
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyStyle {
    Romance,
    Action,
}

impl ToyStyle {
    pub const ALL: [ToyStyle; 2] = [ToyStyle::Romance, ToyStyle::Action];

    pub fn label(self) -> &'static str {
        match self {
            ToyStyle::Romance => "romance",
            ToyStyle::Action => "action",
        }
    }

    fn lexicon(self) -> &'static StyleLexicon {
        match self {
            ToyStyle::Romance => &ROMANCE,
            ToyStyle::Action => &ACTION,
        }
    }

    /// Content words used only by this style.
    pub fn content_words(self) -> Vec<&'static str> {
        let l = self.lexicon();
        l.nouns.iter().chain(l.verbs).chain(l.adjectives).copied().collect()
    }

    fn title_stem(self) -> &'static str {
        match self {
            ToyStyle::Romance => "Hearts of Summer",
            ToyStyle::Action => "Steel and Fire",
        }
    }

    fn catalog_genres(self) -> &'static str {
        match self {
            ToyStyle::Romance => "Romance;New Adult;Teen",
            ToyStyle::Action => "Adventure;Thriller;Science Fiction",
        }
    }
}

fn sentence(style: ToyStyle, rng: &mut impl Rng) -> String {
    let l = style.lexicon();
    let pron = *["he", "she", "they"].choose(rng).unwrap();
    let det = *["the", "a"].choose(rng).unwrap();
    let noun = *l.nouns.choose(rng).unwrap();
    let noun2 = *l.nouns.choose(rng).unwrap();
    let verb = *l.verbs.choose(rng).unwrap();
    let verb2 = *l.verbs.choose(rng).unwrap();
    let adj = *l.adjectives.choose(rng).unwrap();
    let adj2 = *l.adjectives.choose(rng).unwrap();
    match rng.random_range(0..5) {
        0 => format!("{pron} {verb} {det} {adj} {noun}."),
        1 => format!("the {noun} {verb} a {noun2} in the {adj} {noun}."),
        2 => format!("{pron} {verb} the {noun} and {verb2} a {adj} {noun2}."),
        3 => format!("the {adj} {noun} was {adj2}."),
        _ => format!("then {pron} {verb} with the {adj} {noun2}."),
    }
}

/// One paragraph of roughly `target` words (never fewer), ending on a full sentence.
pub fn passage_with_words(style: ToyStyle, target: usize, rng: &mut impl Rng) -> String {
    let mut out = String::new();
    while crate::corpus::word_count(&out) < target {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence(style, rng));
    }
    out
}

/// A paragraph whose whitespace word count lies in `[30, 60]`.
pub fn style_passage(style: ToyStyle, rng: &mut impl Rng) -> String {
    loop {
        let p = passage_with_words(style, rng.random_range(30..=50), rng);
        if (30..=60).contains(&crate::corpus::word_count(&p)) {
            return p;
        }
    }
}

const CAPTION_TEMPLATES: [&str; 4] = [
    "a {1} picture with a {2} corner.",
    "the {1} scene has a small {2} square.",
    "a {2} square on a {1} background.",
    "a mostly {1} image with some {2}.",
];

pub fn caption(main: &str, accent: &str, template: usize) -> String {
    CAPTION_TEMPLATES[template % CAPTION_TEMPLATES.len()]
        .replace("{1}", main)
        .replace("{2}", accent)
}

/// `size × size` image filled with `main` and a `size/2` square of `accent` in the
/// top-left corner.
pub fn two_colour_image(main: &str, accent: &str, size: u32) -> Result<RgbImage> {
    let px = |c: &str| palette_rgb(c).map(Rgb).ok_or_else(|| Error::config(format!("unknown colour `{c}`")));
    let (m, a) = (px(main)?, px(accent)?);
    Ok(RgbImage::from_fn(size, size, |x, y| if x < size / 2 && y < size / 2 { a } else { m }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub passages_per_style: usize,
    pub books_per_style: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub captions_per_image: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            passages_per_style: 2000,
            books_per_style: 10,
            train_images: 120,
            test_images: 20,
            captions_per_image: 3,
            image_size: 32,
            seed: 0,
        }
    }
}

/// File layout of a generated world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyWorld {
    pub root: PathBuf,
    pub books: PathBuf,
    pub catalog: PathBuf,
    /// Training images; caption `file_name`s are relative to this directory.
    pub train_image_dir: PathBuf,
    pub test_image_dir: PathBuf,
    pub train_captions: PathBuf,
    pub test_captions: PathBuf,
    /// Number of in-range passages written per style.
    pub passages: BTreeMap<String, usize>,
}

impl ToyWorld {
    pub fn layout(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            books: root.join("books"),
            catalog: root.join("catalog.csv"),
            train_image_dir: root.join("images/train"),
            test_image_dir: root.join("images/test"),
            train_captions: root.join("captions_train.json"),
            test_captions: root.join("captions_test.json"),
            passages: BTreeMap::new(),
        }
    }
}

#[derive(Serialize)]
struct CocoImageOut {
    id: u64,
    file_name: String,
}

#[derive(Serialize)]
struct CocoAnnotationOut {
    id: u64,
    image_id: u64,
    caption: String,
}

#[derive(Serialize)]
struct CocoOut {
    images: Vec<CocoImageOut>,
    annotations: Vec<CocoAnnotationOut>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes books, a genre catalog, images and COCO-style caption files under `root`.
/// Each book also holds a few paragraphs outside the 30 to 60 word range, and one extra
/// book has no catalog entry.
pub fn write_toy_world(root: &Path, cfg: &ToyWorldConfig) -> Result<ToyWorld> {
    let mut world = ToyWorld::layout(root);
    for d in [&world.books, &world.train_image_dir, &world.test_image_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut catalog = csv::Writer::from_path(&world.catalog).map_err(|e| Error::input(world.catalog.display().to_string(), e.to_string()))?;
    catalog
        .write_record(["title", "genres"])
        .map_err(|e| Error::input("catalog", e.to_string()))?;
    let books = cfg.books_per_style.max(1);
    for style in ToyStyle::ALL {
        for b in 0..books {
            let share = cfg.passages_per_style / books + usize::from(b < cfg.passages_per_style % books);
            let mut paras = vec![format!("Chapter {}", b + 1)];
            for i in 0..share {
                paras.push(style_passage(style, &mut rng));
                if i % 40 == 39 {
                    paras.push(passage_with_words(style, 64, &mut rng));
                }
            }
            let title = format!("{} {:02}", style.title_stem(), b + 1);
            let file = world.books.join(format!("{}.txt", title.to_lowercase().replace(' ', "_")));
            write_file(&file, paras.join("\n\n") + "\n")?;
            catalog
                .write_record([title.as_str(), style.catalog_genres()])
                .map_err(|e| Error::input("catalog", e.to_string()))?;
        }
        world.passages.insert(style.label().to_string(), cfg.passages_per_style);
    }
    catalog.flush().map_err(|e| Error::io(&world.catalog, e))?;
    write_file(
        &world.books.join("untitled_notes.txt"),
        passage_with_words(ToyStyle::Romance, 40, &mut rng) + "\n",
    )?;

    let mut image_id = 0u64;
    let mut ann_id = 0u64;
    for (count, path, dir) in [
        (cfg.train_images, &world.train_captions, &world.train_image_dir),
        (cfg.test_images, &world.test_captions, &world.test_image_dir),
    ] {
        let mut out = CocoOut {
            images: vec![],
            annotations: vec![],
        };
        for _ in 0..count {
            let main = *COLOR_NAMES.choose(&mut rng).unwrap();
            let accent = loop {
                let c = *COLOR_NAMES.choose(&mut rng).unwrap();
                if c != main {
                    break c;
                }
            };
            image_id += 1;
            let name = format!("img_{image_id:04}.png");
            two_colour_image(main, accent, cfg.image_size)?
                .save(dir.join(&name))
                .map_err(|e| Error::input(name.clone(), e.to_string()))?;
            out.images.push(CocoImageOut {
                id: image_id,
                file_name: name,
            });
            let start = rng.random_range(0..CAPTION_TEMPLATES.len());
            for k in 0..cfg.captions_per_image.max(1) {
                ann_id += 1;
                out.annotations.push(CocoAnnotationOut {
                    id: ann_id,
                    image_id,
                    caption: caption(main, accent, start + k),
                });
            }
        }
        crate::io::write_json(path, &out)?;
    }
    Ok(world)
}

/// Unigram distribution of word tokens.
pub fn unigram(texts: &[&str]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for t in texts {
        for w in pre_tokenize(t) {
            *counts.entry(w).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.values_mut().for_each(|v| *v /= total);
    }
    counts
}

/// `KL(p || q)` with `q` smoothed by `alpha` mass spread over the union support.
pub fn kl_divergence(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>, alpha: f64) -> f64 {
    let support: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let n = support.len() as f64;
    support
        .into_iter()
        .filter_map(|w| {
            let pv = p.get(w).copied().unwrap_or(0.0);
            if pv == 0.0 {
                return None;
            }
            let qv = (q.get(w).copied().unwrap_or(0.0) + alpha / n) / (1.0 + alpha);
            Some(pv * (pv / qv).ln())
        })
        .sum()
}
