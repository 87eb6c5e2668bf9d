use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppst::cli::RunConfig;
use ppst::generation::GenerationRecord;
use ppst::io::read_jsonl;

fn ppst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppst"))
        .args(args)
        .env_remove(ppst::metrics::external::SCORER_ENDPOINT_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ppst")
}

fn ok(args: &[&str]) -> String {
    let out = ppst(args);
    assert!(
        out.status.success(),
        "ppst {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Output directory named on the `<key>: wrote <dir>` line.
fn written(stdout: &str, run: &Path) -> PathBuf {
    let rel = stdout
        .lines()
        .find_map(|l| l.split(": wrote ").nth(1))
        .unwrap_or_else(|| panic!("no output line in {stdout:?}"));
    run.join(rel.trim())
}

fn small_world(dir: &Path) -> (PathBuf, PathBuf) {
    let root = dir.join("toy");
    let root_s = root.to_str().unwrap();
    ok(&["make-toy-data", "--out", root_s, "--passages-per-style", "60", "--train-images", "12", "--test-images", "3"]);
    let cfg_path = root.join("ppst.toml");
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.lm.n_positions = 128;
    cfg.lm.train.max_epochs = 1;
    cfg.mapper.hidden_dim = 32;
    cfg.mapper.max_epochs = 1;
    cfg.adapters.max_epochs = 1;
    cfg.adapters.validation_fraction = 0.1;
    cfg.decode.min_length = 12;
    cfg.decode.max_length = Some(24);
    cfg.decode.beam_size = 3;
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    (root, cfg_path)
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (root, cfg_path) = small_world(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let run = root.join("runs/default");

    let first = ok(&["--config", cfg, "build-corpus"]);
    assert!(first.contains("romance") && first.contains("passages: 120"), "{first}");
    assert!(ok(&["--config", cfg, "build-corpus"]).contains("build-corpus: up to date"));
    let lm = written(&ok(&["--config", cfg, "pretrain-lm"]), &run);
    assert!(lm.join("weights.safetensors").exists());
    ok(&["--config", cfg, "train-mapper"]);
    assert!(run.join("cache/embeddings.bin").exists());
    let adapter = written(&ok(&["--config", cfg, "train-adapter", "--style", "romance"]), &run);
    assert!(adapter.ends_with("checkpoints/adapter-romance-0001"));
    ok(&["--config", cfg, "train-adapter", "--style", "non-styled"]);
    assert_eq!(ppst(&["--config", cfg, "train-adapter", "--style", "western"]).status.code(), Some(2));
    assert_eq!(ppst(&["--config", cfg, "train-adapter", "--style", "horror"]).status.code(), Some(2));

    let images = root.join("images/test");
    let images_s = images.to_str().unwrap();
    let a = written(&ok(&["--config", cfg, "generate", "--style", "romance", "--images", images_s]), &run);
    let b = written(&ok(&["--config", cfg, "--force", "generate", "--style", "romance", "--images", images_s]), &run);
    assert_ne!(a, b);
    let ra = std::fs::read(a.join("records.jsonl")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("records.jsonl")).unwrap());
    let records: Vec<GenerationRecord> = read_jsonl(&a.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r.style, "romance");
        assert!(r.error.is_none());
        assert!(r.token_count >= 12 && r.token_count <= 24, "{}", r.token_count);
        assert!(r.model_manifest.contains_key("adapter_checksum"));
    }
    let plain = written(&ok(&["--config", cfg, "generate", "--style", "plain", "--images", images_s]), &run);
    let plain_records: Vec<GenerationRecord> = read_jsonl(&plain.join("records.jsonl")).unwrap();
    assert!(plain_records.iter().all(|r| r.style == "plain"));

    let gold = root.join("captions_test.json");
    let rec = a.join("records.jsonl");
    let report = written(
        &ok(&["--config", cfg, "evaluate", "--records", rec.to_str().unwrap(), "--gold", gold.to_str().unwrap()]),
        &run,
    );
    let table = std::fs::read_to_string(report.join("table.txt")).unwrap();
    assert!(table.contains("ROUGE-L") && table.contains("CLIPScore"), "{table}");
    let rep = ppst::cli::stages::read_report(&report).unwrap();
    assert_eq!(rep.per_item.len(), 3);
    assert!(rep.corpus.contains_key("clip_score"));
    assert!(rep.unavailable.contains(&"bertscore".to_string()));

    let manifest = std::fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
    assert!(!run.join(".lock").exists());
}

#[test]
fn corrupt_images_become_failed_records() {
    let dir = tempfile::tempdir().unwrap();
    let (root, cfg_path) = small_world(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let run = root.join("runs/default");
    for stage in ["build-corpus", "pretrain-lm", "train-mapper"] {
        ok(&["--config", cfg, stage]);
    }
    let images = dir.path().join("mixed");
    std::fs::create_dir(&images).unwrap();
    std::fs::copy(root.join("images/test/img_0013.png"), images.join("a.png")).unwrap();
    std::fs::write(images.join("b.png"), b"not an image").unwrap();
    std::fs::write(images.join("notes.txt"), b"ignored").unwrap();
    let out = written(&ok(&["--config", cfg, "generate", "--style", "plain", "--images", images.to_str().unwrap()]), &run);
    let records: Vec<GenerationRecord> = read_jsonl(&out.join("records.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.image_ref.as_str()).collect::<Vec<_>>(), ["a.png", "b.png"]);
    assert!(records[0].error.is_none());
    assert!(records[1].error.as_deref().unwrap().contains("b.png"));

    let missing = ppst(&["--config", cfg, "generate", "--style", "romance", "--images", images.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("train-adapter --style romance"));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[decode]\nbeem_size = 2\n").unwrap();
    assert_eq!(ppst(&["--config", bad.to_str().unwrap(), "build-corpus"]).status.code(), Some(2));
    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let out = ppst(&["--config", empty.to_str().unwrap(), "build-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.books_dir"));
    assert_eq!(ppst(&["--config", dir.path().join("absent.toml").to_str().unwrap(), "pretrain-lm"]).status.code(), Some(2));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (root, cfg_path) = small_world(dir.path());
    let run = root.join("runs/default");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "12345\n").unwrap();
    let out = ppst(&["--config", cfg_path.to_str().unwrap(), "build-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("12345"));
    assert!(run.join(".lock").exists());
}
