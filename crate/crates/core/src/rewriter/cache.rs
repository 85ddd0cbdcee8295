//! On-disk cache of generations, one JSON file per request key.
//!
//! Keys hash every field that changes the output, so a re-run with identical
//! settings makes no network calls. Writes are atomic, which keeps the cache
//! readable if a run is interrupted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    key: String,
    text: String,
}

/// The inputs that determine one generation.
#[derive(Debug, Clone, Copy)]
pub struct CacheKey<'a> {
    pub template_id: &'a str,
    pub prompt: &'a str,
    pub model: &'a str,
    pub temperature: f64,
    pub seed: u64,
    pub index: usize,
}

impl CacheKey<'_> {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.template_id,
            self.prompt,
            self.model,
            &format!("{:?}", self.temperature),
            &self.seed.to_string(),
            &self.index.to_string(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct GenerationCache {
    dir: PathBuf,
}

impl GenerationCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get(&self, key: &CacheKey<'_>) -> Option<String> {
        let digest = key.digest();
        let entry: Entry = jsonl::read_json(&self.path(&digest)).ok()?;
        (entry.key == digest).then_some(entry.text)
    }

    pub fn put(&self, key: &CacheKey<'_>, text: &str) -> Result<()> {
        let digest = key.digest();
        let entry = Entry {
            key: digest.clone(),
            text: text.to_string(),
        };
        jsonl::write_atomic(&self.path(&digest), serde_json::to_string(&entry)?.as_bytes())
    }
}
