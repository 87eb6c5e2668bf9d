//! The `ppst` command line.

pub mod config;
pub mod stages;
pub mod store;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::toy::{write_toy_world, ToyWorldConfig};

pub use config::RunConfig;
pub use stages::Ctx;

#[derive(Debug, Parser)]
#[command(name = "ppst", version, about = "Styled story generation from images")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Re-run a stage even when its output is up to date.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk and label books, and collect caption pairs.
    BuildCorpus,
    /// Train the base language model on the corpus.
    PretrainLm,
    /// Train the visual prefix mapper against the frozen LM.
    TrainMapper,
    /// Train one style's adapters, or fully fine-tune with `--style non-styled`.
    TrainAdapter {
        #[arg(long)]
        style: String,
    },
    /// Write one story per image in a directory.
    Generate {
        /// A configured style, `non-styled` or `plain`.
        #[arg(long)]
        style: String,
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
    },
    /// Score generation records against reference captions.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
        /// COCO annotation file (`.json`) or caption JSONL.
        #[arg(long, value_name = "FILE")]
        gold: PathBuf,
        /// Image root for CLIPScore.
        #[arg(long, value_name = "DIR")]
        images: Option<PathBuf>,
    },
    /// Write a small synthetic dataset and a matching `ppst.toml`.
    MakeToyData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        passages_per_style: usize,
        #[arg(long, default_value_t = 120)]
        train_images: usize,
        #[arg(long, default_value_t = 20)]
        test_images: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.resolve_paths(&std::env::current_dir().map_err(|e| Error::io(".", e))?);
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn make_toy_data(out: &Path, cfg: &ToyWorldConfig) -> Result<()> {
    let world = write_toy_world(out, cfg)?;
    let mut run = RunConfig {
        seed: cfg.seed,
        artifact_dir: PathBuf::from("runs"),
        ..RunConfig::default()
    };
    let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
    run.corpus.books_dir = Some(rel(&world.books));
    run.corpus.catalog = Some(rel(&world.catalog));
    run.corpus.captions_train = Some(rel(&world.train_captions));
    run.corpus.captions_test = Some(rel(&world.test_captions));
    run.corpus.images_dir = Some(rel(&world.train_image_dir));
    run.eval.images_root = Some(rel(&world.test_image_dir));
    run.corpus.caption_fraction = 1.0;
    let path = out.join("ppst.toml");
    std::fs::write(&path, run.to_toml()?).map_err(|e| Error::io(&path, e))?;
    println!("toy data written to {}; config at {}", out.display(), path.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Command::MakeToyData {
        out,
        passages_per_style,
        train_images,
        test_images,
    } = &cli.command
    {
        let cfg = ToyWorldConfig {
            passages_per_style: *passages_per_style,
            train_images: *train_images,
            test_images: *test_images,
            seed: cli.seed.unwrap_or(0),
            ..ToyWorldConfig::default()
        };
        return make_toy_data(out, &cfg);
    }
    let ctx = Ctx::new(load_config(&cli)?, cli.force)?;
    match &cli.command {
        Command::BuildCorpus => ctx.build_corpus()?,
        Command::PretrainLm => ctx.pretrain_lm()?,
        Command::TrainMapper => ctx.train_mapper()?,
        Command::TrainAdapter { style } => ctx.train_adapter(style)?,
        Command::Generate { style, images } => ctx.generate(style, images)?,
        Command::Evaluate { records, gold, images } => ctx.evaluate(records, gold, images.as_deref())?,
        Command::MakeToyData { .. } => unreachable!(),
    };
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
