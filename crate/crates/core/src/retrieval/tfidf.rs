//! Classical TF-IDF with cosine similarity: `w(t) = tf(t) · ln(N / df(t))`.
//!
//! Query terms unseen in the corpus are dropped. A term present in every
//! document has weight 0, so a document made only of such terms has a zero
//! vector and scores 0 against every query.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Retriever;
use crate::corpus::{doc_text, Corpus};
use crate::error::{Error, Result};
use crate::textproc::{tokenize, TokenStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfIndex {
    doc_ids: Vec<String>,
    doc_freq: BTreeMap<String, u32>,
    /// per doc: (term, weight) sorted by term
    vectors: Vec<Vec<(String, f64)>>,
    norms: Vec<f64>,
}

impl TfidfIndex {
    pub fn build(corpus: &Corpus) -> Self {
        Self::from_texts(corpus.docs().iter().map(|d| (d.doc_id.clone(), doc_text(d))))
    }

    pub fn from_texts(docs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut doc_ids = Vec::new();
        let mut tfs: Vec<BTreeMap<String, u32>> = Vec::new();
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        for (id, text) in docs {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokenize(&text).into_inner() {
                *tf.entry(t).or_default() += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
            doc_ids.push(id);
            tfs.push(tf);
        }
        let n = doc_ids.len() as f64;
        let idf = |df: u32| (n / df as f64).ln();
        let vectors: Vec<Vec<(String, f64)>> = tfs
            .into_iter()
            .map(|tf| {
                tf.into_iter()
                    .map(|(t, c)| {
                        let w = c as f64 * idf(doc_freq[&t]);
                        (t, w)
                    })
                    .collect()
            })
            .collect();
        let norms = vectors
            .iter()
            .map(|v| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt())
            .collect();
        Self {
            doc_ids,
            doc_freq,
            vectors,
            norms,
        }
    }

    fn query_vector<'q>(&self, query: &'q TokenStream) -> (HashMap<&'q str, f64>, f64) {
        let n = self.doc_ids.len() as f64;
        let mut tf: BTreeMap<&'q str, u32> = BTreeMap::new();
        for t in query.iter() {
            if self.doc_freq.contains_key(t.as_str()) {
                *tf.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut norm_sq = 0.0;
        let mut vec = HashMap::with_capacity(tf.len());
        for (t, c) in tf {
            let w = c as f64 * (n / self.doc_freq[t] as f64).ln();
            norm_sq += w * w;
            vec.insert(t, w);
        }
        (vec, norm_sq.sqrt())
    }

    fn cosine(&self, q: &HashMap<&str, f64>, q_norm: f64, doc: usize) -> f64 {
        let d_norm = self.norms[doc];
        if q_norm == 0.0 || d_norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.vectors[doc]
            .iter()
            .filter_map(|(t, w)| q.get(t.as_str()).map(|qw| qw * w))
            .sum();
        dot / (q_norm * d_norm)
    }

    pub fn score(&self, query: &TokenStream, doc_id: &str) -> Result<f64> {
        let doc = self
            .doc_ids
            .iter()
            .position(|d| d == doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        let (q, q_norm) = self.query_vector(query);
        Ok(self.cosine(&q, q_norm, doc))
    }

    pub fn score_tokens(&self, query: &TokenStream) -> Vec<f64> {
        let (q, q_norm) = self.query_vector(query);
        (0..self.doc_ids.len()).map(|d| self.cosine(&q, q_norm, d)).collect()
    }

    pub fn norm(&self, doc_id: &str) -> Option<f64> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| self.norms[i])
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.doc_ids.is_empty()
            || self.vectors.len() != self.doc_ids.len()
            || self.norms.len() != self.doc_ids.len()
        {
            return Err(Error::invalid("tfidf snapshot has inconsistent document tables"));
        }
        Ok(())
    }
}

impl Retriever for TfidfIndex {
    fn name(&self) -> &'static str {
        "tfidf"
    }

    fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn score_all(&self, query: &str) -> Result<Vec<f64>> {
        Ok(self.score_tokens(&tokenize(query)))
    }
}
