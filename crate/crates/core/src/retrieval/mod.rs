//! Sparse, dense and hybrid retrievers over a tool corpus.
//!
//! Every retriever scores the whole corpus exhaustively and returns the top
//! `k` documents. Rankings are fully deterministic: scores descending, ties
//! broken by ascending `doc_id`.

mod bm25;
mod dense;
mod hybrid;
mod snapshot;
mod tfidf;

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::{dense_score, DenseRetriever, Embedder, EmbeddingStore, HashingEmbedder};
pub use hybrid::{hybrid_score, minmax, HybridRetriever, NormStats, HYBRID_POOL_DEPTH};
pub use snapshot::{IndexSnapshot, SNAPSHOT_FORMAT_VERSION};
pub use tfidf::TfidfIndex;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ordered top-k result for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// The first `k` entries as a new list.
    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

/// Ranking order: higher score first, then ascending doc_id.
pub fn rank_cmp(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    // +0.0 folds -0.0 onto 0.0 so total_cmp treats them as equal
    (b_score + 0.0)
        .total_cmp(&(a_score + 0.0))
        .then_with(|| a_id.cmp(b_id))
}

/// Selects the `k` best documents from a full score vector aligned with `doc_ids`.
pub fn top_k(doc_ids: &[String], scores: &[f64], k: usize) -> Vec<ScoredDoc> {
    debug_assert_eq!(doc_ids.len(), scores.len());
    let cmp = |a: &usize, b: &usize| rank_cmp(scores[*a], &doc_ids[*a], scores[*b], &doc_ids[*b]);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter()
        .map(|i| ScoredDoc {
            doc_id: doc_ids[i].clone(),
            score: scores[i],
        })
        .collect()
}

/// A built, immutable retriever. Implementations are safe to share across threads.
pub trait Retriever: Send + Sync {
    fn name(&self) -> &'static str;

    /// Searchable doc_ids; `score_all` returns scores aligned with this slice.
    fn doc_ids(&self) -> &[String];

    fn score_all(&self, query: &str) -> Result<Vec<f64>>;

    fn retrieve(&self, query_id: &str, query: &str, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let scores = self.score_all(query)?;
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: top_k(self.doc_ids(), &scores, k),
        })
    }
}

/// Retrieves every `(query_id, text)` in parallel; output order equals input order.
pub fn retrieve_batch(
    retriever: &dyn Retriever,
    queries: &[(String, String)],
    k: usize,
) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .map(|(id, text)| retriever.retrieve(id, text, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Tfidf,
    Dense,
    Hybrid,
}

impl RetrieverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Tfidf => "tfidf",
            RetrieverKind::Dense => "dense",
            RetrieverKind::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bm25" => Ok(RetrieverKind::Bm25),
            "tfidf" | "tf-idf" => Ok(RetrieverKind::Tfidf),
            "dense" => Ok(RetrieverKind::Dense),
            "hybrid" => Ok(RetrieverKind::Hybrid),
            other => Err(Error::invalid(format!("unknown retriever {other:?}"))),
        }
    }
}

/// Where dense vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    /// Offline signed feature hashing of tokens.
    Hashing { dim: usize },
    /// OpenAI-compatible `/embeddings` endpoint.
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    #[serde(default)]
    pub bm25: Bm25Params,
    /// Dense weight for the hybrid retriever.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Precomputed document vectors (`embeddings.jsonl`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
}

fn default_alpha() -> f64 {
    0.5
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            kind: RetrieverKind::Bm25,
            bm25: Bm25Params::default(),
            alpha: default_alpha(),
            embeddings: None,
            embedder: EmbedderConfig::default(),
        }
    }
}

impl RetrieverConfig {
    pub fn with_kind(kind: RetrieverKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

pub fn build_embedder(config: &EmbedderConfig) -> Result<Arc<dyn Embedder>> {
    Ok(match config {
        EmbedderConfig::Hashing { dim } => Arc::new(HashingEmbedder::new(*dim)?),
        EmbedderConfig::Http {
            endpoint,
            model,
            timeout_secs,
        } => Arc::new(crate::rewriter::http::HttpEmbedder::new(
            endpoint,
            model,
            std::time::Duration::from_secs_f64(*timeout_secs),
        )?),
    })
}

fn build_dense(config: &RetrieverConfig, corpus: &Corpus) -> Result<DenseRetriever> {
    let embedder = build_embedder(&config.embedder)?;
    let store = match &config.embeddings {
        Some(path) => EmbeddingStore::load(path, Some(corpus))?,
        None => EmbeddingStore::embed_corpus(corpus, embedder.as_ref())?,
    };
    DenseRetriever::new(store, embedder)
}

/// Builds the configured retriever over `corpus`.
pub fn build_retriever(config: &RetrieverConfig, corpus: &Corpus) -> Result<Arc<dyn Retriever>> {
    Ok(match config.kind {
        RetrieverKind::Bm25 => Arc::new(Bm25Index::build(corpus, config.bm25)?),
        RetrieverKind::Tfidf => Arc::new(TfidfIndex::build(corpus)),
        RetrieverKind::Dense => Arc::new(build_dense(config, corpus)?),
        RetrieverKind::Hybrid => {
            let dense = build_dense(config, corpus)?;
            let sparse = Bm25Index::build(corpus, config.bm25)?;
            Arc::new(HybridRetriever::new(Arc::new(dense), Arc::new(sparse), config.alpha)?)
        }
    })
}
