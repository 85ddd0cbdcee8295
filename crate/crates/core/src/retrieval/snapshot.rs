//! Versioned JSON snapshots of built indexes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bm25Index, EmbeddingStore, TfidfIndex};
use crate::error::{Error, Result};
use crate::jsonl;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum IndexSnapshot {
    Bm25(Bm25Index),
    Tfidf(TfidfIndex),
    Dense(EmbeddingStore),
}

#[derive(Serialize)]
struct Envelope<'a> {
    format_version: u32,
    #[serde(flatten)]
    snapshot: &'a IndexSnapshot,
}

#[derive(Deserialize)]
struct Header {
    format_version: u32,
}

#[derive(Deserialize)]
struct Body {
    #[serde(flatten)]
    snapshot: IndexSnapshot,
}

impl IndexSnapshot {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Envelope {
            format_version: SNAPSHOT_FORMAT_VERSION,
            snapshot: self,
        })?;
        jsonl::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    /// Checks the version before decoding the body, so a newer layout fails fast.
    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text)?;
        if header.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::SnapshotVersion {
                found: header.format_version,
                expected: SNAPSHOT_FORMAT_VERSION,
            });
        }
        let body: Body = serde_json::from_str(text)?;
        match &body.snapshot {
            IndexSnapshot::Bm25(i) => i.validate()?,
            IndexSnapshot::Tfidf(i) => i.validate()?,
            IndexSnapshot::Dense(s) => s.validate()?,
        }
        Ok(body.snapshot)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            IndexSnapshot::Bm25(_) => "bm25",
            IndexSnapshot::Tfidf(_) => "tfidf",
            IndexSnapshot::Dense(_) => "dense",
        }
    }
}
