//! Okapi BM25 over an inverted index.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ unique(q)} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln((N − df + 0.5) / (df + 0.5) + 1)
//! ```
//!
//! The `+1` inside the logarithm keeps idf non-negative for very common terms.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::Retriever;
use crate::corpus::{doc_text, Corpus};
use crate::error::{Error, Result};
use crate::textproc::{tokenize, TokenStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::invalid(format!("bm25 k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid(format!("bm25 b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    /// term → postings sorted by doc position
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Unique tokens in first-occurrence order; fixes the summation order.
pub(crate) fn unique_terms(query: &TokenStream) -> Vec<&str> {
    let mut seen = HashSet::new();
    query
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        Self::from_texts(
            corpus.docs().iter().map(|d| (d.doc_id.clone(), doc_text(d))),
            params,
        )
    }

    /// Builds from raw `(doc_id, text)` pairs.
    pub fn from_texts(docs: impl IntoIterator<Item = (String, String)>, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (pos, (id, text)) in docs.into_iter().enumerate() {
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate doc_id {id}")));
            }
            let tokens = tokenize(&text);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens.iter() {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc: pos as u32,
                    tf: count,
                });
            }
            doc_ids.push(id);
            doc_lens.push(tokens.len() as u32);
        }
        if doc_ids.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let avgdl = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64;
        Ok(Self {
            params,
            doc_ids,
            doc_lens,
            avgdl,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        // avgdl is 0 only when every doc is empty, in which case tf is never > 0
        let len_ratio = if self.avgdl > 0.0 {
            self.doc_lens[doc] as f64 / self.avgdl
        } else {
            0.0
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_ratio))
    }

    /// Score of one document; terms absent from the index contribute 0.
    pub fn score(&self, query: &TokenStream, doc_id: &str) -> Result<f64> {
        let doc = self
            .doc_ids
            .iter()
            .position(|d| d == doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        let mut score = 0.0;
        for term in unique_terms(query) {
            let Some(list) = self.postings.get(term) else { continue };
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_weight(self.idf(term), list[i].tf, doc);
            }
        }
        Ok(score)
    }

    pub fn score_tokens(&self, query: &TokenStream) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for term in unique_terms(query) {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for p in list {
                scores[p.doc as usize] += self.term_weight(idf, p.tf, p.doc as usize);
            }
        }
        scores
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.doc_ids.is_empty() || self.doc_ids.len() != self.doc_lens.len() {
            return Err(Error::invalid("bm25 snapshot has inconsistent document tables"));
        }
        let n = self.doc_ids.len() as u32;
        if self.postings.values().flatten().any(|p| p.doc >= n || p.tf == 0) {
            return Err(Error::invalid("bm25 snapshot has a posting for an unknown document"));
        }
        Ok(())
    }
}

impl Retriever for Bm25Index {
    fn name(&self) -> &'static str {
        "bm25"
    }

    fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn score_all(&self, query: &str) -> Result<Vec<f64>> {
        Ok(self.score_tokens(&tokenize(query)))
    }
}
