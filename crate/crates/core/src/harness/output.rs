//! Output directory layout and the single-writer lock.

use std::fs::OpenOptions;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jsonl;

pub const LOCK_FILE: &str = ".toolbridge.lock";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const PER_QUERY: &str = "per_query.jsonl";
pub const RUN_CONFIG: &str = "run_config.json";

/// An output directory held exclusively by this process until dropped.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(path.to_path_buf())),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        jsonl::write_json(&self.join(name), value)
    }

    pub fn write_jsonl<'a, T: Serialize + 'a>(&self, name: &str, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
        jsonl::write(&self.join(name), rows)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        jsonl::write_atomic(&self.join(name), text.as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}
