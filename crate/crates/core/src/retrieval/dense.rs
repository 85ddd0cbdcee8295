//! Exhaustive cosine search over unit-normalized document embeddings.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Retriever;
use crate::corpus::{doc_text, Corpus};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::textproc::tokenize;

const NORM_TOLERANCE: f64 = 1e-6;

/// Turns texts into dense vectors.
pub trait Embedder: Send + Sync {
    /// Output dimension when known ahead of time.
    fn dim(&self) -> Option<usize>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Signed feature hashing of tokens into a fixed number of buckets.
///
/// Needs no model, so dense and hybrid retrieval can run fully offline.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text).iter() {
            let h = Self::fnv1a(t.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `v / |v|`, or `None` for zero or non-finite vectors.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2(v);
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingLine {
    doc_id: String,
    vector: Vec<f64>,
}

/// doc_id → unit vector, all of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore {
    dim: usize,
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingStore {
    /// Normalizes and validates raw vectors.
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::invalid("embedding store is empty"))?;
        if dim == 0 {
            return Err(Error::invalid("embedding vectors must have positive dimension"));
        }
        let mut seen = HashSet::new();
        let mut doc_ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len());
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate embedding for {id}")));
            }
            let unit = normalized(&v)
                .ok_or_else(|| Error::invalid(format!("embedding for {id} has zero or non-finite norm")))?;
            doc_ids.push(id);
            vectors.push(unit);
        }
        Ok(Self { dim, doc_ids, vectors })
    }

    /// Loads `embeddings.jsonl`. With a corpus, every doc must be covered and
    /// rows are reordered to corpus order.
    pub fn load(path: &Path, corpus: Option<&Corpus>) -> Result<Self> {
        let rows: Vec<(usize, EmbeddingLine)> = jsonl::read(path)?;
        let mut rows: Vec<(String, Vec<f64>)> = rows.into_iter().map(|(_, l)| (l.doc_id, l.vector)).collect();
        if let Some(corpus) = corpus {
            for (id, _) in &rows {
                if corpus.get(id).is_none() {
                    return Err(Error::UnknownDoc(id.clone()));
                }
            }
            rows.sort_by_key(|(id, _)| corpus.index_of(id));
            if rows.len() != corpus.len() {
                let have: HashSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
                let missing = corpus
                    .docs()
                    .iter()
                    .find(|d| !have.contains(d.doc_id.as_str()))
                    .map(|d| d.doc_id.clone())
                    .unwrap_or_default();
                return Err(Error::invalid(format!("{}: no embedding for {missing}", path.display())));
            }
        }
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<EmbeddingLine> = self
            .doc_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| EmbeddingLine {
                doc_id: id.clone(),
                vector: v.clone(),
            })
            .collect();
        jsonl::write(path, &rows)
    }

    pub fn embed_corpus(corpus: &Corpus, embedder: &dyn Embedder) -> Result<Self> {
        let texts: Vec<String> = corpus.docs().iter().map(doc_text).collect();
        let vecs = embedder.embed(&texts)?;
        if vecs.len() != texts.len() {
            return Err(Error::Backend(format!(
                "embedder returned {} vectors for {} documents",
                vecs.len(),
                texts.len()
            )));
        }
        // a doc with no tokens hashes to the zero vector; give it a tiny constant direction
        let rows = corpus
            .docs()
            .iter()
            .zip(vecs)
            .map(|(d, v)| {
                let v = if l2(&v) == 0.0 {
                    let mut z = vec![0.0; v.len().max(1)];
                    z[0] = 1.0;
                    z
                } else {
                    v
                };
                (d.doc_id.clone(), v)
            })
            .collect();
        Self::new(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vector(&self, doc_id: &str) -> Option<&[f64]> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| self.vectors[i].as_slice())
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Cosine of `query_vec` against every stored vector. A zero query
    /// vector scores 0 everywhere.
    pub fn score_vector(&self, query_vec: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(query_vec)?;
        let Some(q) = normalized(query_vec) else {
            return Ok(vec![0.0; self.vectors.len()]);
        };
        Ok(self
            .vectors
            .iter()
            .map(|d| d.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
            .collect())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.doc_ids.len() != self.vectors.len() || self.doc_ids.is_empty() {
            return Err(Error::invalid("embedding snapshot has inconsistent tables"));
        }
        for v in &self.vectors {
            self.check_dim(v)?;
            if (l2(v) - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::invalid("embedding snapshot holds a non-unit vector"));
            }
        }
        Ok(())
    }
}

/// Cosine similarity between `query_vec` and one stored document.
pub fn dense_score(store: &EmbeddingStore, query_vec: &[f64], doc_id: &str) -> Result<f64> {
    store.check_dim(query_vec)?;
    let d = store.vector(doc_id).ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
    let Some(q) = normalized(query_vec) else {
        return Ok(0.0);
    };
    Ok(d.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

pub struct DenseRetriever {
    store: EmbeddingStore,
    embedder: Arc<dyn Embedder>,
}

impl DenseRetriever {
    pub fn new(store: EmbeddingStore, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if let Some(d) = embedder.dim() {
            if d != store.dim() {
                return Err(Error::DimensionMismatch {
                    expected: store.dim(),
                    actual: d,
                });
            }
        }
        Ok(Self { store, embedder })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl Retriever for DenseRetriever {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn doc_ids(&self) -> &[String] {
        self.store.doc_ids()
    }

    fn score_all(&self, query: &str) -> Result<Vec<f64>> {
        let v = self
            .embedder
            .embed(&[query.to_string()])?
            .pop()
            .ok_or_else(|| Error::Backend("embedder returned no vector".into()))?;
        self.store.score_vector(&v)
    }
}
