use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterTrainConfig;
use crate::error::{Error, Result};
use crate::generation::DecodeConfig;
use crate::nn::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub artifact_dir: PathBuf,
    pub run_id: String,
    pub models: ModelsConfig,
    pub corpus: CorpusConfig,
    pub lm: LmStageConfig,
    pub mapper: MapperStageConfig,
    pub adapters: AdapterStageConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            artifact_dir: PathBuf::from("runs"),
            run_id: "default".into(),
            models: ModelsConfig::default(),
            corpus: CorpusConfig::default(),
            lm: LmStageConfig::default(),
            mapper: MapperStageConfig::default(),
            adapters: AdapterStageConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// Image-text encoder identifier.
    pub encoder: String,
    /// Existing LM checkpoint directory; when unset the run's `pretrain-lm` output is used.
    pub lm_checkpoint: Option<PathBuf>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            encoder: "toy-concept-d64-s0".into(),
            lm_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub books_dir: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// COCO-style caption annotation files.
    pub captions_train: Option<PathBuf>,
    pub captions_test: Option<PathBuf>,
    /// Directory that caption `file_name`s are relative to.
    pub images_dir: Option<PathBuf>,
    /// Share of training caption pairs kept.
    pub caption_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            books_dir: None,
            catalog: None,
            captions_train: None,
            captions_test: None,
            images_dir: None,
            caption_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmStageConfig {
    pub n_embd: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub n_positions: usize,
    pub max_vocab: usize,
    pub train: AdapterTrainConfig,
}

impl Default for LmStageConfig {
    fn default() -> Self {
        Self {
            n_embd: 64,
            n_layer: 2,
            n_head: 4,
            n_positions: 1024,
            max_vocab: 5000,
            train: AdapterTrainConfig {
                max_epochs: 2,
                learning_rate: 3e-3,
                batch_size: 32,
                max_seq_len: 128,
                seed: 0,
                patience: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperStageConfig {
    pub hidden_dim: usize,
    pub prefix_length: usize,
    pub activation: Activation,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
}

impl Default for MapperStageConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            prefix_length: 10,
            activation: Activation::Tanh,
            max_epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            max_seq_len: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterStageConfig {
    pub styles: Vec<String>,
    /// Defaults to an eighth of the LM width.
    pub bottleneck_dim: Option<usize>,
    /// Share of a style's passages held out for early stopping.
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    /// 0 disables early stopping.
    #[serde(with = "crate::adapters::patience_serde")]
    pub patience: Option<usize>,
}

impl Default for AdapterStageConfig {
    fn default() -> Self {
        Self {
            styles: vec!["romance".into(), "action".into()],
            bottleneck_dim: None,
            validation_fraction: 0.05,
            max_epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            max_seq_len: 512,
            patience: Some(2),
        }
    }
}

impl AdapterStageConfig {
    pub fn train_config(&self, seed: u64) -> AdapterTrainConfig {
        AdapterTrainConfig {
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_seq_len: self.max_seq_len,
            seed,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory that record `image_ref`s are relative to.
    pub images_root: Option<PathBuf>,
    /// `host:port` of an external scorer; the environment variable takes precedence.
    pub scorer_endpoint: Option<String>,
}

impl RunConfig {
    /// Reads a TOML file; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.artifact_dir);
        for p in [
            &mut self.models.lm_checkpoint,
            &mut self.corpus.books_dir,
            &mut self.corpus.catalog,
            &mut self.corpus.captions_train,
            &mut self.corpus.captions_test,
            &mut self.corpus.images_dir,
            &mut self.eval.images_root,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::config(format!("invalid run_id `{}`", self.run_id)));
        }
        if !(self.corpus.caption_fraction > 0.0 && self.corpus.caption_fraction <= 1.0) {
            return Err(Error::config("corpus.caption_fraction must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.adapters.validation_fraction) {
            return Err(Error::config("adapters.validation_fraction must lie in [0, 1)"));
        }
        for s in &self.adapters.styles {
            crate::corpus::Genre::from_style(s)?;
        }
        self.decode.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.artifact_dir.join(&self.run_id)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }
}
