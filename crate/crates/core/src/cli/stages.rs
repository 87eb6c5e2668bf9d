use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::adapters::{
    load_adapters, passage_sequence, save_adapters, train_adapter, train_full_finetune, AdapterConfig,
    AdapterManifest, StyledLanguageModel, NON_STYLED, PLAIN,
};
use crate::corpus::{
    build_styled_corpus, filter_by_style, load_books, load_coco_captions, subsample, Genre, GenreCatalog,
    ImageCaptionPair, Split, StyledPassage,
};
use crate::error::{Error, Result};
use crate::generation::{generate, DecodeConfig, GenerationRecord, GenerationTiming};
use crate::io::{read_json, read_jsonl, sha256_hex, write_json, write_jsonl, Fingerprint};
use crate::lm::{load_lm, save_lm, LmManifest};
use crate::lm::{LmConfig, TransformerLm};
use crate::mapper::{load_mapper, save_mapper, train_mapper, CaptionExample, MapperConfig, MapperManifest, MapperTrainConfig, PrefixMapper};
use crate::metrics::report::item_ids;
use crate::metrics::{evaluate_run, render_table, EvalContext, MetricReport, ScorerClient};
use crate::tokenizer::WordTokenizer;
use crate::vision::{encoder_fingerprint, resolve_image, ConceptEncoder, ContrastiveEncoder, EmbeddingCache};

use super::config::RunConfig;
use super::store::{ManifestEntry, RunStore};

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const PER_ITEM_FILE: &str = "per_item.jsonl";
const EMBEDDING_CACHE: &str = "cache/embeddings.bin";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Seed for one stage, derived from the run seed.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    let h = sha256_hex(label.as_bytes());
    seed ^ u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect()
}

fn require<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(format!("`{name}` is not set in the config")))
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::input(p.display().to_string(), "not found"))
    }
}

pub struct StageOutput {
    pub output: String,
    pub skipped: bool,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub force: bool,
    pub store: RunStore,
    pub device: Device,
}

struct StageSpec<'a> {
    stage: &'a str,
    key: String,
    area: &'a str,
    name: String,
    config_hash: String,
    input_fingerprint: String,
}

impl Ctx {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        let store = RunStore::open(&cfg.run_dir())?;
        Ok(Self {
            cfg,
            force,
            store,
            device: Device::Cpu,
        })
    }

    /// Reader over an existing run; takes no lock and cannot run stages that write.
    pub fn read_only(cfg: RunConfig) -> Result<Self> {
        let store = RunStore::open_read_only(&cfg.run_dir())?;
        Ok(Self {
            cfg,
            force: false,
            store,
            device: Device::Cpu,
        })
    }

    /// Loads the latest mapper and the model for `style` from the run.
    pub fn pipeline(&self, style: &str) -> Result<Pipeline> {
        let mapper_dir = self.latest_output("train-mapper", "train-mapper")?;
        let (model, tokenizer, mut info) = self.load_model(style)?;
        let (mapper, mm) = load_mapper(&mapper_dir, DType::F32, &self.device)?;
        let encoder = self.encoder()?;
        if mm.encoder_model_id != encoder.model_id() {
            return Err(Error::Compatibility(format!(
                "mapper was trained on `{}` embeddings but the configured encoder is `{}`",
                mm.encoder_model_id,
                encoder.model_id()
            )));
        }
        info.insert("mapper_checksum".into(), mm.checksum.clone());
        info.insert("encoder".into(), encoder_fingerprint(&encoder));
        Ok(Pipeline {
            model,
            tokenizer,
            mapper,
            encoder,
            decode: DecodeConfig {
                seed: self.cfg.seed,
                ..self.cfg.decode.clone()
            },
            info,
        })
    }

    fn versions(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("ppst".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("encoder".to_string(), self.cfg.models.encoder.clone()),
        ])
    }

    fn run_stage(
        &self,
        spec: StageSpec<'_>,
        body: impl FnOnce(&Path) -> Result<(Vec<String>, serde_json::Value)>,
    ) -> Result<StageOutput> {
        if !self.force {
            if let Some(e) = self.store.up_to_date(&spec.key, &spec.config_hash, &spec.input_fingerprint)? {
                println!("{}: up to date ({})", spec.key, e.output);
                return Ok(StageOutput {
                    output: e.output,
                    skipped: true,
                });
            }
        }
        let started_at = now();
        let (rel, seq) = self.store.next_output(spec.area, &spec.name)?;
        let dir = self.store.path(&rel);
        let (outputs, summary) = match body(&dir) {
            Ok(v) => v,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        self.store.append(&ManifestEntry {
            stage: spec.stage.to_string(),
            key: spec.key.clone(),
            seq,
            output: rel.clone(),
            config_hash: spec.config_hash,
            input_fingerprint: spec.input_fingerprint,
            versions: self.versions(),
            started_at,
            finished_at: now(),
            outputs,
            config: self.cfg.clone(),
            summary,
        })?;
        println!("{}: wrote {rel}", spec.key);
        Ok(StageOutput {
            output: rel,
            skipped: false,
        })
    }

    fn latest_output(&self, key: &str, hint: &str) -> Result<PathBuf> {
        match self.store.latest(key)? {
            Some(e) => Ok(self.store.path(&e.output)),
            None => Err(Error::config(format!("run has no `{key}` output yet; run `ppst {hint}` first"))),
        }
    }

    fn corpus_dir(&self) -> Result<PathBuf> {
        self.latest_output("build-corpus", "build-corpus")
    }

    fn base_lm_dir(&self) -> Result<PathBuf> {
        match &self.cfg.models.lm_checkpoint {
            Some(p) => {
                require_exists(p)?;
                Ok(p.clone())
            }
            None => self.latest_output("pretrain-lm", "pretrain-lm"),
        }
    }

    fn encoder(&self) -> Result<ConceptEncoder> {
        ConceptEncoder::from_model_id(&self.cfg.models.encoder)
    }

    fn fingerprint_dirs(&self, dirs: &[&Path]) -> Result<String> {
        let mut fp = Fingerprint::new();
        for d in dirs {
            fp.update_path(d)?;
        }
        Ok(fp.finish())
    }

    pub fn build_corpus(&self) -> Result<StageOutput> {
        let c = &self.cfg.corpus;
        let books_dir = require(&c.books_dir, "corpus.books_dir")?;
        let catalog_path = require(&c.catalog, "corpus.catalog")?;
        require_exists(books_dir)?;
        require_exists(catalog_path)?;
        let mut fp = Fingerprint::new();
        fp.update_path(books_dir)?.update_path(catalog_path)?;
        for p in [&c.captions_train, &c.captions_test].into_iter().flatten() {
            require_exists(p)?;
            fp.update_path(p)?;
        }
        let spec = StageSpec {
            stage: "build-corpus",
            key: "build-corpus".into(),
            area: "checkpoints",
            name: "corpus".into(),
            config_hash: hash_of(&json!({"seed": self.cfg.seed, "corpus": c}))?,
            input_fingerprint: fp.finish(),
        };
        self.run_stage(spec, |out| {
            let books = load_books(books_dir)?;
            let catalog = GenreCatalog::from_path(catalog_path)?;
            let (passages, stats) = build_styled_corpus(&books, &catalog);
            write_jsonl(&out.join(PASSAGES_FILE), &passages)?;
            let mut captions = Vec::new();
            if let Some(p) = &c.captions_train {
                let all = load_coco_captions(p, Split::Train)?;
                captions.extend(subsample(&all, c.caption_fraction, stage_seed(self.cfg.seed, "subsample"))?);
            }
            if let Some(p) = &c.captions_test {
                captions.extend(load_coco_captions(p, Split::Test)?);
            }
            write_jsonl(&out.join(CAPTIONS_FILE), &captions)?;
            write_json(&out.join(STATS_FILE), &stats)?;
            println!("books: {} total, {} matched; passages: {}", stats.books_total, stats.books_matched, stats.passages);
            println!("{:<16} {:>8}", "genre", "passages");
            for g in Genre::ALL {
                println!("{:<16} {:>8}", g.label(), stats.genre_counts.get(g.label()).copied().unwrap_or(0));
            }
            Ok((
                vec![PASSAGES_FILE.into(), CAPTIONS_FILE.into(), STATS_FILE.into()],
                json!({"passages": stats.passages, "captions": captions.len(), "stats": stats}),
            ))
        })
    }

    fn load_corpus(&self) -> Result<(PathBuf, Vec<StyledPassage>, Vec<ImageCaptionPair>)> {
        let dir = self.corpus_dir()?;
        let passages = read_jsonl(&dir.join(PASSAGES_FILE))?;
        let captions = read_jsonl(&dir.join(CAPTIONS_FILE))?;
        Ok((dir, passages, captions))
    }

    pub fn pretrain_lm(&self) -> Result<StageOutput> {
        if self.cfg.models.lm_checkpoint.is_some() {
            return Err(Error::config("models.lm_checkpoint is set; there is no LM to pretrain"));
        }
        let corpus_dir = self.corpus_dir()?;
        let spec = StageSpec {
            stage: "pretrain-lm",
            key: "pretrain-lm".into(),
            area: "checkpoints",
            name: "lm".into(),
            config_hash: hash_of(&json!({"seed": self.cfg.seed, "lm": self.cfg.lm}))?,
            input_fingerprint: self.fingerprint_dirs(&[&corpus_dir])?,
        };
        self.run_stage(spec, |out| {
            let (_, passages, captions) = self.load_corpus()?;
            let train_caps: Vec<&ImageCaptionPair> = captions.iter().filter(|c| c.split == Split::Train).collect();
            let texts: Vec<&str> = passages
                .iter()
                .map(|p| p.text.as_str())
                .chain(train_caps.iter().map(|c| c.caption_text.as_str()))
                .collect();
            if texts.is_empty() {
                return Err(Error::config("corpus has neither passages nor training captions"));
            }
            let l = &self.cfg.lm;
            let tokenizer = WordTokenizer::build(texts.iter().copied(), l.max_vocab);
            let lm_cfg = LmConfig {
                vocab_size: tokenizer.vocab_size(),
                n_positions: l.n_positions,
                n_embd: l.n_embd,
                n_layer: l.n_layer,
                n_head: l.n_head,
                layer_norm_eps: 1e-5,
            };
            let init = TransformerLm::init(lm_cfg, stage_seed(self.cfg.seed, "lm-init"), DType::F32, &self.device)?;
            let eos = tokenizer.eos_id();
            let seqs: Vec<Vec<u32>> = texts
                .iter()
                .map(|t| passage_sequence(&tokenizer.encode(t), eos, l.train.max_seq_len))
                .collect();
            let train_cfg = crate::adapters::AdapterTrainConfig {
                seed: stage_seed(self.cfg.seed, "lm-train"),
                ..l.train.clone()
            };
            let (lm, log) = train_full_finetune(&seqs, None, &init, &train_cfg, eos)?;
            let lm_id = format!("toy-gpt-e{}-l{}-h{}", l.n_embd, l.n_layer, l.n_head);
            let m = save_lm(out, &lm, &tokenizer, &lm_id, json!({"config": train_cfg, "loss_log": log, "sequences": seqs.len()}))?;
            Ok((vec![], json!({"lm_id": m.lm_id, "fingerprint": m.fingerprint, "final_loss": log.final_loss()})))
        })
    }

    fn load_base_lm(&self) -> Result<(PathBuf, TransformerLm, WordTokenizer, LmManifest)> {
        let dir = self.base_lm_dir()?;
        let (lm, tok, m) = load_lm(&dir, DType::F32, &self.device)?;
        Ok((dir, lm, tok, m))
    }

    pub fn train_mapper(&self) -> Result<StageOutput> {
        let corpus_dir = self.corpus_dir()?;
        let lm_dir = self.base_lm_dir()?;
        let images_dir = require(&self.cfg.corpus.images_dir, "corpus.images_dir")?;
        let encoder = self.encoder()?;
        let spec = StageSpec {
            stage: "train-mapper",
            key: "train-mapper".into(),
            area: "checkpoints",
            name: "mapper".into(),
            config_hash: hash_of(&json!({"seed": self.cfg.seed, "mapper": self.cfg.mapper, "encoder": self.cfg.models.encoder}))?,
            input_fingerprint: self.fingerprint_dirs(&[&corpus_dir, &lm_dir, images_dir])?,
        };
        self.run_stage(spec, |out| {
            let (_, lm, tok, lm_manifest) = self.load_base_lm()?;
            let (_, _, captions) = self.load_corpus()?;
            let train: Vec<&ImageCaptionPair> = captions.iter().filter(|c| c.split == Split::Train).collect();
            let cache_path = self.store.path(EMBEDDING_CACHE);
            let mut cache = if cache_path.exists() { EmbeddingCache::load(&cache_path)? } else { EmbeddingCache::new() };
            let mut examples = Vec::with_capacity(train.len());
            let mut data_fp = Fingerprint::new();
            for pair in &train {
                let emb = cache.image(&encoder, &resolve_image(images_dir, &pair.image_ref), &pair.image_ref)?;
                let mut tokens = tok.encode(&pair.caption_text);
                tokens.push(tok.eos_id());
                data_fp.update(&pair.image_ref).update(&pair.caption_text);
                examples.push(CaptionExample {
                    embedding: emb.vector,
                    tokens,
                });
            }
            cache.save(&cache_path)?;
            let m = &self.cfg.mapper;
            let mapper_cfg = MapperConfig {
                input_dim: encoder.embed_dim(),
                hidden_dim: m.hidden_dim,
                prefix_length: m.prefix_length,
                lm_embed_dim: lm.hidden_dim(),
                activation: m.activation,
            };
            let train_cfg = MapperTrainConfig {
                max_epochs: m.max_epochs,
                learning_rate: m.learning_rate,
                batch_size: m.batch_size,
                max_seq_len: m.max_seq_len,
                seed: stage_seed(self.cfg.seed, "mapper-train"),
            };
            let init = PrefixMapper::init(mapper_cfg.clone(), stage_seed(self.cfg.seed, "mapper-init"), DType::F32, &self.device)?;
            let before = lm.fingerprint()?;
            let (mapper, log) = train_mapper(&examples, &lm, &init, &train_cfg)?;
            if lm.fingerprint()? != before {
                return Err(Error::Numeric("base LM parameters changed during mapper training".into()));
            }
            let manifest = MapperManifest {
                mapper: mapper_cfg,
                training: train_cfg,
                encoder_model_id: encoder.model_id().to_string(),
                lm_id: lm_manifest.lm_id.clone(),
                lm_fingerprint: before,
                data_fingerprint: data_fp.finish(),
                final_loss: log.final_loss(),
                loss_log: log.clone(),
                checksum: mapper.checksum()?,
            };
            save_mapper(out, &mapper, &manifest)?;
            Ok((vec![], json!({"examples": examples.len(), "final_loss": log.final_loss(), "epochs": log.epochs.len()})))
        })
    }

    pub fn train_adapter(&self, style: &str) -> Result<StageOutput> {
        let non_styled = style == NON_STYLED;
        if !non_styled && !self.cfg.adapters.styles.iter().any(|s| s == style) {
            return Err(Error::config(format!(
                "style `{style}` is not configured; choose one of {:?} or `{NON_STYLED}`",
                self.cfg.adapters.styles
            )));
        }
        let corpus_dir = self.corpus_dir()?;
        let lm_dir = self.base_lm_dir()?;
        let a = &self.cfg.adapters;
        let spec = StageSpec {
            stage: "train-adapter",
            key: format!("train-adapter:{style}"),
            area: "checkpoints",
            name: if non_styled { "nonstyled".into() } else { format!("adapter-{}", slug(style)) },
            config_hash: hash_of(&json!({"seed": self.cfg.seed, "adapters": a, "style": style}))?,
            input_fingerprint: self.fingerprint_dirs(&[&corpus_dir, &lm_dir])?,
        };
        self.run_stage(spec, |out| {
            let (_, lm, tok, lm_manifest) = self.load_base_lm()?;
            let (_, passages, _) = self.load_corpus()?;
            let selected = if non_styled { passages } else { filter_by_style(&passages, style)? };
            let eos = tok.eos_id();
            let mut seqs: Vec<Vec<u32>> = selected
                .iter()
                .map(|p| passage_sequence(&tok.encode(&p.text), eos, a.max_seq_len))
                .collect();
            if seqs.is_empty() {
                return Err(Error::config(format!("no passages carry style `{style}` among their first three genres")));
            }
            let seed = stage_seed(self.cfg.seed, &format!("adapter:{style}"));
            seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_val = (a.validation_fraction * seqs.len() as f64).floor() as usize;
            let val = seqs.split_off(seqs.len() - n_val);
            let val = (!val.is_empty()).then_some(val.as_slice());
            let train_cfg = a.train_config(seed);
            let before = lm.fingerprint()?;
            if non_styled {
                let (ft, log) = train_full_finetune(&seqs, val, &lm, &train_cfg, eos)?;
                let m = save_lm(
                    out,
                    &ft,
                    &tok,
                    &format!("{}+nonstyled", lm_manifest.lm_id),
                    json!({"config": train_cfg, "loss_log": log, "base_fingerprint": before, "passages": seqs.len()}),
                )?;
                return Ok((vec![], json!({"fingerprint": m.fingerprint, "final_loss": log.final_loss(), "epochs": log.epochs.len()})));
            }
            let adapter_cfg = match a.bottleneck_dim {
                Some(b) => AdapterConfig {
                    bottleneck_dim: b,
                    ..AdapterConfig::for_hidden(lm.hidden_dim())
                },
                None => AdapterConfig::for_hidden(lm.hidden_dim()),
            };
            let (set, log) = train_adapter(style, &seqs, val, &lm, &adapter_cfg, &train_cfg, eos)?;
            if lm.fingerprint()? != before {
                return Err(Error::Numeric("base LM parameters changed during adapter training".into()));
            }
            let mut data_fp = Fingerprint::new();
            for s in &seqs {
                data_fp.update(s.iter().flat_map(|t| t.to_le_bytes()).collect::<Vec<u8>>());
            }
            let manifest = AdapterManifest {
                style_id: style.to_string(),
                adapter: adapter_cfg,
                lm_fingerprint: before,
                layers: lm.n_layer(),
                training: train_cfg,
                data_fingerprint: data_fp.finish(),
                final_loss: log.final_loss(),
                loss_log: log.clone(),
                checksum: set.checksum()?,
            };
            save_adapters(out, &set, &manifest)?;
            Ok((
                vec![],
                json!({"train": seqs.len(), "validation": val.map_or(0, |v| v.len()), "final_loss": log.final_loss(), "epochs": log.epochs.len(), "stopped_early": log.stopped_early}),
            ))
        })
    }

    /// Styled view for `style` plus identifying fields for records.
    fn load_model(&self, style: &str) -> Result<(StyledLanguageModel, WordTokenizer, BTreeMap<String, String>)> {
        let (_, base, tok, lm_manifest) = self.load_base_lm()?;
        let mut info = BTreeMap::from([
            ("lm_id".to_string(), lm_manifest.lm_id.clone()),
            ("lm_fingerprint".to_string(), lm_manifest.fingerprint.clone()),
        ]);
        let base = Arc::new(base);
        let model = match style {
            PLAIN => StyledLanguageModel::plain(base),
            NON_STYLED => {
                let dir = self.latest_output(&format!("train-adapter:{NON_STYLED}"), "train-adapter --style non-styled")?;
                let (ft, _, m) = load_lm(&dir, DType::F32, &self.device)?;
                info.insert("finetune_fingerprint".into(), m.fingerprint);
                StyledLanguageModel::full_finetune(Arc::new(ft))
            }
            named => {
                if !self.cfg.adapters.styles.iter().any(|s| s == named) {
                    return Err(Error::config(format!(
                        "style `{named}` is not configured; choose one of {:?}, `{NON_STYLED}` or `{PLAIN}`",
                        self.cfg.adapters.styles
                    )));
                }
                let dir = self.latest_output(&format!("train-adapter:{named}"), &format!("train-adapter --style {named}"))?;
                let (set, m) = load_adapters(&dir, DType::F32, &self.device)?;
                info.insert("adapter_checksum".into(), m.checksum);
                StyledLanguageModel::attach(base, Arc::new(set))?
            }
        };
        Ok((model, tok, info))
    }

    pub fn generate(&self, style: &str, images: &Path) -> Result<StageOutput> {
        require_exists(images)?;
        let images = images.canonicalize().map_err(|e| Error::io(images, e))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        let mapper_dir = self.latest_output("train-mapper", "train-mapper")?;
        let lm_dir = self.base_lm_dir()?;
        let mut model_dirs = vec![mapper_dir, lm_dir];
        if style != PLAIN {
            let key = format!("train-adapter:{style}");
            if let Some(e) = self.store.latest(&key)? {
                model_dirs.push(self.store.path(&e.output));
            }
        }
        let mut fp = Fingerprint::new();
        fp.update_path(&images)?;
        for d in &model_dirs {
            fp.update_path(d)?;
        }
        let spec = StageSpec {
            stage: "generate",
            key: format!("generate:{style}:{}", images.display()),
            area: "records",
            name: format!("generate-{}", slug(style)),
            config_hash: hash_of(&json!({"seed": self.cfg.seed, "decode": self.cfg.decode, "style": style}))?,
            input_fingerprint: fp.finish(),
        };
        self.run_stage(spec, |out| {
            let pipeline = self.pipeline(style)?;
            let label = pipeline.style_label();
            let mut records = Vec::with_capacity(files.len());
            let mut timing = Vec::with_capacity(files.len());
            for path in &files {
                let image_ref = path
                    .strip_prefix(&images)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .replace('\\', "/");
                let t = Instant::now();
                records.push(pipeline.generate_record(path, &image_ref)?);
                timing.push(GenerationTiming {
                    image_ref,
                    wall_time_s: t.elapsed().as_secs_f64(),
                });
            }
            write_jsonl(&out.join(RECORDS_FILE), &records)?;
            write_jsonl(&out.join(TIMING_FILE), &timing)?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            Ok((
                vec![RECORDS_FILE.into(), TIMING_FILE.into()],
                json!({"records": records.len(), "failed": failed, "style": label}),
            ))
        })
    }

    pub fn evaluate(&self, records_path: &Path, gold_path: &Path, images: Option<&Path>) -> Result<StageOutput> {
        require_exists(records_path)?;
        require_exists(gold_path)?;
        let images_root = images
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.eval.images_root.clone())
            .or_else(|| self.cfg.corpus.images_dir.clone());
        let mut fp = Fingerprint::new();
        fp.update_path(records_path)?.update_path(gold_path)?;
        if let Some(r) = &images_root {
            fp.update_path(r)?;
        }
        let endpoint = std::env::var(crate::metrics::external::SCORER_ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.cfg.eval.scorer_endpoint.clone());
        let spec = StageSpec {
            stage: "evaluate",
            key: format!("evaluate:{}:{}", records_path.display(), gold_path.display()),
            area: "reports",
            name: "evaluate".into(),
            config_hash: hash_of(&json!({"encoder": self.cfg.models.encoder, "scorer": endpoint, "images": images_root}))?,
            input_fingerprint: fp.finish(),
        };
        self.run_stage(spec, |out| {
            let records: Vec<GenerationRecord> = read_jsonl(records_path)?;
            let gold = load_gold(gold_path)?;
            let encoder = self.encoder()?;
            let scorer = endpoint.as_deref().map(ScorerClient::new);
            let mut ctx = EvalContext {
                images_root: images_root.as_deref(),
                encoder: images_root.as_ref().map(|_| &encoder as &dyn ContrastiveEncoder),
                cache: None,
                scorer: scorer.as_ref(),
            };
            let label = records.first().map(|r| r.style.clone()).unwrap_or_default();
            let report = evaluate_run(&label, &records, &gold, &mut ctx)?;
            for d in &report.diagnostics {
                tracing::warn!("{d}");
            }
            if report.per_item.is_empty() {
                return Err(Error::input(records_path.display().to_string(), "no evaluable items"));
            }
            write_jsonl(&out.join(REPORT_FILE), std::slice::from_ref(&report))?;
            let table = render_table(std::slice::from_ref(&report));
            std::fs::write(out.join(TABLE_FILE), &table).map_err(|e| Error::io(out.join(TABLE_FILE), e))?;
            write_jsonl(&out.join(PER_ITEM_FILE), &per_item_rows(&records, &report))?;
            print!("{table}");
            Ok((
                vec![REPORT_FILE.into(), TABLE_FILE.into(), PER_ITEM_FILE.into()],
                json!({"items": report.per_item.len(), "records": records.len(), "unavailable": report.unavailable, "corpus": report.corpus}),
            ))
        })
    }
}

/// Everything needed to turn an image into a story.
pub struct Pipeline {
    pub model: StyledLanguageModel,
    pub tokenizer: WordTokenizer,
    pub mapper: PrefixMapper,
    pub encoder: ConceptEncoder,
    pub decode: DecodeConfig,
    pub info: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn style_label(&self) -> String {
        self.model.style_label()
    }

    /// Unreadable images yield a record carrying the error; other failures propagate.
    pub fn generate_record(&self, path: &Path, image_ref: &str) -> Result<GenerationRecord> {
        let label = self.style_label();
        let result = self
            .encoder
            .encode_image(path, image_ref)
            .and_then(|emb| self.mapper.map_prefix(&emb))
            .and_then(|prefix| generate(&prefix, &self.model, &self.decode, self.tokenizer.eos_id()));
        match result {
            Ok(outcome) => Ok(GenerationRecord::from_outcome(
                image_ref,
                &label,
                &outcome,
                &self.tokenizer,
                &self.decode,
                self.info.clone(),
            )),
            Err(e @ (Error::Input { .. } | Error::Io { .. })) => {
                tracing::warn!(%image_ref, "generation failed: {e}");
                Ok(GenerationRecord::failed(image_ref, &label, &self.decode, self.info.clone(), e.to_string()))
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct PerItemRow {
    pub id: String,
    pub image_ref: String,
    pub style: String,
    pub metrics: BTreeMap<String, f64>,
    pub evaluated: bool,
}

fn per_item_rows(records: &[GenerationRecord], report: &MetricReport) -> Vec<PerItemRow> {
    item_ids(records)
        .into_iter()
        .zip(records)
        .map(|(id, r)| {
            let metrics = report.per_item.get(&id).cloned();
            PerItemRow {
                evaluated: metrics.is_some(),
                metrics: metrics.unwrap_or_default(),
                id,
                image_ref: r.image_ref.clone(),
                style: r.style.clone(),
            }
        })
        .collect()
}

/// Gold captions keyed by `image_ref`, from a COCO annotation file (`.json`) or caption
/// JSONL.
pub fn load_gold(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let pairs: Vec<ImageCaptionPair> = if path.extension().is_some_and(|e| e == "json") {
        load_coco_captions(path, Split::Test)?
    } else {
        read_jsonl(path)?
    };
    let mut gold: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in pairs {
        gold.entry(p.image_ref).or_default().push(p.caption_text);
    }
    Ok(gold)
}

pub fn read_report(dir: &Path) -> Result<MetricReport> {
    let mut rows: Vec<MetricReport> = read_jsonl(&dir.join(REPORT_FILE))?;
    rows.pop().ok_or_else(|| Error::input(dir.display().to_string(), "empty report"))
}

pub fn read_stats(dir: &Path) -> Result<crate::corpus::CorpusStats> {
    read_json(&dir.join(STATS_FILE))
}
