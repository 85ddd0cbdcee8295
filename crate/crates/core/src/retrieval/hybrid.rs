//! Linear fusion of a dense and a sparse retriever.
//!
//! Each score family is min-max normalized per query. The min/max come from
//! the union of both retrievers' top-[`HYBRID_POOL_DEPTH`] candidates, and the
//! same affine map is then applied to every document so rankings stay
//! prefix-consistent across `k`.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::{top_k, Retriever};
use crate::error::{Error, Result};

pub const HYBRID_POOL_DEPTH: usize = 50;

/// Min and max of one score family over the candidate pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub dense_min: f64,
    pub dense_max: f64,
    pub sparse_min: f64,
    pub sparse_max: f64,
}

impl NormStats {
    pub fn from_pool(dense: &[f64], sparse: &[f64], pool: impl IntoIterator<Item = usize>) -> Self {
        let mut s = NormStats {
            dense_min: f64::INFINITY,
            dense_max: f64::NEG_INFINITY,
            sparse_min: f64::INFINITY,
            sparse_max: f64::NEG_INFINITY,
        };
        for i in pool {
            s.dense_min = s.dense_min.min(dense[i]);
            s.dense_max = s.dense_max.max(dense[i]);
            s.sparse_min = s.sparse_min.min(sparse[i]);
            s.sparse_max = s.sparse_max.max(sparse[i]);
        }
        s
    }
}

/// `(x − min) / (max − min)`, or 0.5 when the family is constant.
pub fn minmax(x: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (x - min) / (max - min)
    } else {
        0.5
    }
}

pub fn hybrid_score(dense: f64, sparse: f64, alpha: f64, stats: &NormStats) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * minmax(dense, stats.dense_min, stats.dense_max)
        + (1.0 - alpha) * minmax(sparse, stats.sparse_min, stats.sparse_max))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")))
    }
}

pub struct HybridRetriever {
    dense: Arc<dyn Retriever>,
    sparse: Arc<dyn Retriever>,
    alpha: f64,
}

impl HybridRetriever {
    /// Both retrievers must index the same doc_ids in the same order.
    pub fn new(dense: Arc<dyn Retriever>, sparse: Arc<dyn Retriever>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if dense.doc_ids() != sparse.doc_ids() {
            return Err(Error::invalid("hybrid retrievers must share one document order"));
        }
        Ok(Self { dense, sparse, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Union of each family's top-`HYBRID_POOL_DEPTH` positions.
    pub fn candidate_pool(&self, dense: &[f64], sparse: &[f64]) -> BTreeSet<usize> {
        let ids = self.dense.doc_ids();
        let pos = |d: &str| ids.iter().position(|x| x == d).expect("doc from own index");
        top_k(ids, dense, HYBRID_POOL_DEPTH)
            .iter()
            .chain(top_k(ids, sparse, HYBRID_POOL_DEPTH).iter())
            .map(|e| pos(&e.doc_id))
            .collect()
    }
}

impl Retriever for HybridRetriever {
    fn name(&self) -> &'static str {
        "hybrid"
    }

    fn doc_ids(&self) -> &[String] {
        self.dense.doc_ids()
    }

    fn score_all(&self, query: &str) -> Result<Vec<f64>> {
        let dense = self.dense.score_all(query)?;
        let sparse = self.sparse.score_all(query)?;
        let stats = NormStats::from_pool(&dense, &sparse, self.candidate_pool(&dense, &sparse));
        dense
            .iter()
            .zip(&sparse)
            .map(|(&d, &s)| hybrid_score(d, s, self.alpha, &stats))
            .collect()
    }
}
