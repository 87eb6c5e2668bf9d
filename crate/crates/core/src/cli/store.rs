//! Run directory: `manifest.jsonl` (append-only), `checkpoints/`, `records/`, `reports/`,
//! plus a scratch `cache/`. Every stage writes a fresh `<name>-<seq>` directory.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;

use super::config::RunConfig;

pub const MANIFEST: &str = "manifest.jsonl";
pub const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    /// Stage plus its distinguishing arguments, e.g. `train-adapter:romance`.
    pub key: String,
    pub seq: u32,
    /// Output directory relative to the run directory.
    pub output: String,
    pub config_hash: String,
    pub input_fingerprint: String,
    pub versions: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub config: RunConfig,
    #[serde(default)]
    pub summary: serde_json::Value,
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct RunStore {
    root: PathBuf,
    lock: Option<PathBuf>,
}

impl RunStore {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "records", "reports", "cache"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&lock).unwrap_or_default();
                return Err(Error::config(format!(
                    "run directory {} is locked by process {}; remove {} if that process is gone",
                    root.display(),
                    holder.trim(),
                    lock.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock: Some(lock),
        })
    }

    /// Unlocked view of an existing run directory for readers.
    pub fn open_read_only(root: &Path) -> Result<Self> {
        if !root.join(MANIFEST).exists() {
            return Err(Error::config(format!("{} holds no run manifest", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        let p = self.root.join(MANIFEST);
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }

    pub fn latest(&self, key: &str) -> Result<Option<ManifestEntry>> {
        Ok(self.entries()?.into_iter().rev().find(|e| e.key == key))
    }

    /// The most recent entry for `key`, if it was produced from the same config and
    /// inputs and its output still exists.
    pub fn up_to_date(&self, key: &str, config_hash: &str, input_fingerprint: &str) -> Result<Option<ManifestEntry>> {
        Ok(self.latest(key)?.filter(|e| {
            e.config_hash == config_hash && e.input_fingerprint == input_fingerprint && self.path(&e.output).exists()
        }))
    }

    /// Reserves `<area>/<name>-<seq>` with the next unused sequence number.
    pub fn next_output(&self, area: &str, name: &str) -> Result<(String, u32)> {
        let dir = self.root.join(area);
        let prefix = format!("{name}-");
        let mut max = 0;
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.flatten() {
            let fname = entry.file_name().to_string_lossy().into_owned();
            if let Some(n) = fname.strip_prefix(&prefix).and_then(|s| s.parse::<u32>().ok()) {
                max = max.max(n);
            }
        }
        let seq = max + 1;
        let rel = format!("{area}/{name}-{seq:04}");
        let p = self.root.join(&rel);
        std::fs::create_dir(&p).map_err(|e| Error::io(&p, e))?;
        Ok((rel, seq))
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<()> {
        let p = self.root.join(MANIFEST);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
        let line = serde_json::to_string(entry)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
    }
}

impl Drop for RunStore {
    fn drop(&mut self) {
        if let Some(lock) = &self.lock {
            let _ = std::fs::remove_file(lock);
        }
    }
}
