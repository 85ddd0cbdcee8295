//! NDCG@k, the averaged retrieval reward, and relative-delta reporting.
//!
//! Relevance is binary at API granularity and the discount is `log2(i + 1)`
//! for 1-based rank `i`. The ideal DCG truncates at `min(k, |ground truth|)`.

mod report;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use report::{compare, render_markdown, DeltaRow, EvalReport, QueryEval, SubsetSummary, TableRow};

use crate::error::{Error, Result};
use crate::retrieval::{RankedList, Retriever};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdcgConfig {
    pub cutoffs: Vec<usize>,
}

impl Default for NdcgConfig {
    fn default() -> Self {
        Self { cutoffs: vec![5, 10] }
    }
}

impl NdcgConfig {
    pub fn new(mut cutoffs: Vec<usize>) -> Result<Self> {
        cutoffs.sort_unstable();
        cutoffs.dedup();
        if cutoffs.is_empty() || cutoffs[0] == 0 {
            return Err(Error::invalid("NDCG cutoffs must be a non-empty set of positive integers"));
        }
        Ok(Self { cutoffs })
    }

    pub fn max_cutoff(&self) -> usize {
        *self.cutoffs.last().expect("validated non-empty")
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(ranked: &RankedList, ground_truth: &HashSet<String>, k: usize) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth(ranked.query_id.clone()));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let dcg: f64 = ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, e)| ground_truth.contains(&e.doc_id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(ground_truth.len())).map(discount).sum();
    Ok((dcg / idcg).clamp(0.0, 1.0))
}

/// Mean of NDCG@5 on `ranked5` and NDCG@10 on `ranked10`.
pub fn avg_score(ranked5: &RankedList, ranked10: &RankedList, ground_truth: &HashSet<String>) -> Result<f64> {
    Ok((ndcg_at_k(ranked5, ground_truth, 5)? + ndcg_at_k(ranked10, ground_truth, 10)?) / 2.0)
}

/// Signed percentage change `(new − old) / old × 100`.
pub fn relative_delta(new: f64, old: f64) -> Result<f64> {
    if !(old > 0.0) {
        return Err(Error::invalid(format!("relative delta needs old > 0, got {old}")));
    }
    Ok((new - old) / old * 100.0)
}

/// "Avg." delta column: the mean of the per-cutoff deltas.
pub fn avg_delta(per_k: &[(f64, f64)]) -> Result<f64> {
    if per_k.is_empty() {
        return Err(Error::invalid("no cutoffs to average"));
    }
    let sum: f64 = per_k
        .iter()
        .map(|&(new, old)| relative_delta(new, old))
        .sum::<Result<f64>>()?;
    Ok(sum / per_k.len() as f64)
}

/// NDCG at each cutoff plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub ndcg: Vec<f64>,
    pub avg: f64,
}

/// Retrieves once at the largest cutoff and evaluates every cutoff on its
/// prefix; rankings are prefix-consistent so this equals separate retrievals.
pub fn evaluate_query(
    retriever: &dyn Retriever,
    query_id: &str,
    text: &str,
    ground_truth: &HashSet<String>,
    config: &NdcgConfig,
) -> Result<ScoreBreakdown> {
    let ranked = retriever.retrieve(query_id, text, config.max_cutoff())?;
    let ndcg = config
        .cutoffs
        .iter()
        .map(|&k| ndcg_at_k(&ranked, ground_truth, k))
        .collect::<Result<Vec<_>>>()?;
    let avg = ndcg.iter().sum::<f64>() / ndcg.len() as f64;
    Ok(ScoreBreakdown { ndcg, avg })
}

/// The retrieval reward: mean of NDCG@5 and NDCG@10.
pub fn retrieval_score(
    retriever: &dyn Retriever,
    query_id: &str,
    text: &str,
    ground_truth: &HashSet<String>,
) -> Result<f64> {
    Ok(evaluate_query(retriever, query_id, text, ground_truth, &NdcgConfig::default())?.avg)
}
