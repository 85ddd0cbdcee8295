//! Reward scoring of candidate rewrites and construction of the
//! chosen/rejected dataset, plus the sample → score → pair → train loop.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::retrieval_score;
use crate::retrieval::Retriever;
use crate::rewriter::{sample_candidates, CandidateRewrite, RewriteBackend, RewritePrompt};

/// One row of `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub score_chosen: f64,
    pub score_rejected: f64,
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    jsonl::write(path, pairs)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let rows: Vec<(usize, PreferencePair)> = jsonl::read(path)?;
    rows.into_iter()
        .map(|(line, p)| {
            if !(p.score_chosen > p.score_rejected) || p.chosen == p.rejected {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "pair does not prefer a distinct, strictly better text".into(),
                });
            }
            Ok(p)
        })
        .collect()
}

/// Reward of one candidate: mean of NDCG@5 and NDCG@10 with the candidate
/// text as the query. Fills `candidate.score`.
pub fn score_candidate(
    candidate: &mut CandidateRewrite,
    retriever: &dyn Retriever,
    ground_truth: &HashSet<String>,
) -> Result<f64> {
    let s = retrieval_score(retriever, &candidate.query_id, &candidate.text, ground_truth)?;
    candidate.score = Some(s);
    Ok(s)
}

/// Scores every non-failed candidate. Scoring errors leave the score unset,
/// which excludes the candidate from pairing.
pub fn score_all(candidates: &mut [CandidateRewrite], retriever: &dyn Retriever, ground_truth: &HashSet<String>) {
    for c in candidates.iter_mut().filter(|c| !c.is_failed()) {
        if let Err(e) = score_candidate(c, retriever, ground_truth) {
            log::warn!("query {} candidate {}: scoring failed: {e}", c.query_id, c.candidate_index);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOutcome {
    Pair { chosen: usize, rejected: usize },
    /// Every valid candidate has the same reward.
    Equal,
    /// Fewer than two scored candidates.
    Insufficient,
}

/// Picks the first highest- and first lowest-scoring candidate among those
/// with a score. Returns positions into `candidates`.
pub fn select_pair(candidates: &[CandidateRewrite]) -> PairOutcome {
    let scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_failed())
        .filter_map(|(i, c)| c.score.map(|s| (i, s)))
        .collect();
    if scored.len() < 2 {
        return PairOutcome::Insufficient;
    }
    let mut best = scored[0];
    let mut worst = scored[0];
    for &(i, s) in &scored[1..] {
        if s > best.1 {
            best = (i, s);
        }
        if s < worst.1 {
            worst = (i, s);
        }
    }
    if best.1 == worst.1 {
        PairOutcome::Equal
    } else {
        PairOutcome::Pair {
            chosen: best.0,
            rejected: worst.0,
        }
    }
}

/// Builds the preference pair for one record's scored candidates.
pub fn make_pair(prompt: &str, candidates: &[CandidateRewrite]) -> Option<PreferencePair> {
    match select_pair(candidates) {
        PairOutcome::Pair { chosen, rejected } => {
            let (c, r) = (&candidates[chosen], &candidates[rejected]);
            Some(PreferencePair {
                query_id: c.query_id.clone(),
                prompt: prompt.to_string(),
                chosen: c.text.clone(),
                rejected: r.text.clone(),
                score_chosen: c.score.expect("scored"),
                score_rejected: r.score.expect("scored"),
            })
        }
        PairOutcome::Equal => None,
        PairOutcome::Insufficient => {
            log::info!("fewer than two scored candidates; no pair");
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub pairs: usize,
    pub dropped_equal: usize,
    pub dropped_insufficient: usize,
    pub failed_candidates: usize,
    /// Mean over records of the mean reward of their scored candidates.
    pub mean_score: f64,
    pub mean_score_chosen: f64,
    pub mean_score_rejected: f64,
}

impl DatasetSummary {
    /// `records = pairs + dropped_equal + dropped_insufficient`.
    pub fn balanced(&self) -> bool {
        self.records == self.pairs + self.dropped_equal + self.dropped_insufficient
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by query_id.
    pub pairs: Vec<PreferencePair>,
    /// Scored candidates per record, sorted by query_id.
    pub candidates: Vec<Vec<CandidateRewrite>>,
    pub summary: DatasetSummary,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Samples, scores, and pairs every record. Never fails for lack of pairs;
/// see [`build_dpo_dataset`] for the strict form.
pub fn collect_pairs(
    records: &[QueryRecord],
    corpus: &Corpus,
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    retriever: &dyn Retriever,
    n: usize,
) -> Result<Dataset> {
    if n < 2 {
        log::warn!("n = {n}: pairing needs at least two candidates per query, no pairs will be produced");
    }
    let mut order: Vec<&QueryRecord> = records.iter().collect();
    order.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let per_record: Vec<Result<Vec<CandidateRewrite>>> = order
        .par_iter()
        .map(|r| {
            let gt = corpus.ground_truth_ids(r)?;
            let mut cands = sample_candidates(backend, prompt, r, n)?;
            score_all(&mut cands, retriever, &gt);
            Ok(cands)
        })
        .collect();

    let mut summary = DatasetSummary {
        records: order.len(),
        ..DatasetSummary::default()
    };
    let mut pairs = Vec::new();
    let mut candidates = Vec::with_capacity(order.len());
    let mut record_means = Vec::new();
    for (r, cands) in order.iter().zip(per_record) {
        let cands = match cands {
            Ok(c) => c,
            Err(e) => {
                log::warn!("query {}: {e}", r.query_id);
                summary.dropped_insufficient += 1;
                candidates.push(Vec::new());
                continue;
            }
        };
        summary.failed_candidates += cands.iter().filter(|c| c.is_failed()).count();
        let scores: Vec<f64> = cands.iter().filter_map(|c| c.score).collect();
        if !scores.is_empty() {
            record_means.push(mean(&scores));
        }
        match select_pair(&cands) {
            PairOutcome::Pair { .. } => pairs.push(make_pair(&r.vague, &cands).expect("pair selected")),
            PairOutcome::Equal => summary.dropped_equal += 1,
            PairOutcome::Insufficient => summary.dropped_insufficient += 1,
        }
        candidates.push(cands);
    }
    summary.pairs = pairs.len();
    summary.mean_score = mean(&record_means);
    summary.mean_score_chosen = mean(&pairs.iter().map(|p| p.score_chosen).collect::<Vec<_>>());
    summary.mean_score_rejected = mean(&pairs.iter().map(|p| p.score_rejected).collect::<Vec<_>>());
    Ok(Dataset {
        pairs,
        candidates,
        summary,
    })
}

/// Like [`collect_pairs`] but fails when no record yields a pair.
pub fn build_dpo_dataset(
    records: &[QueryRecord],
    corpus: &Corpus,
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    retriever: &dyn Retriever,
    n: usize,
) -> Result<Dataset> {
    let ds = collect_pairs(records, corpus, backend, prompt, retriever, n)?;
    if ds.pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: usize,
    pub backend: String,
    pub pairs: usize,
    pub summary: DatasetSummary,
    pub mean_score: f64,
    /// Pairs file name, relative to the loop's output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs_path: Option<PathBuf>,
}

/// Receives each iteration's pairs and updates the policy that the next
/// iteration samples from.
pub trait TrainerHook {
    fn train(&mut self, iteration: usize, pairs: &[PreferencePair], pairs_path: Option<&Path>) -> Result<()>;
}

/// Does nothing; a single-iteration run that only builds data.
pub struct NoTraining;

impl TrainerHook for NoTraining {
    fn train(&mut self, _: usize, _: &[PreferencePair], _: Option<&Path>) -> Result<()> {
        Ok(())
    }
}

/// Runs an external trainer. `{pairs}` and `{iteration}` in the arguments
/// are replaced by the pairs file path and the 1-based iteration.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub program: String,
    pub args: Vec<String>,
}

impl TrainerHook for CommandHook {
    fn train(&mut self, iteration: usize, _: &[PreferencePair], pairs_path: Option<&Path>) -> Result<()> {
        let pairs = pairs_path.map(|p| p.display().to_string()).unwrap_or_default();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{pairs}", &pairs).replace("{iteration}", &iteration.to_string()))
            .collect();
        let status = Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| Error::TrainerHook {
                iteration,
                message: format!("{}: {e}", self.program),
            })?;
        if !status.success() {
            return Err(Error::TrainerHook {
                iteration,
                message: format!("{} exited with {status}", self.program),
            });
        }
        Ok(())
    }
}

/// Settings shared by every iteration of [`iterate`].
pub struct LoopSetup<'a> {
    pub records: &'a [QueryRecord],
    pub corpus: &'a Corpus,
    pub prompt: &'a RewritePrompt,
    pub retriever: &'a dyn Retriever,
    pub n: usize,
    pub iterations: usize,
    /// Where `pairs_iter{t}.jsonl` and `iteration_log.json` go.
    pub out_dir: Option<&'a Path>,
}

/// Iterative preference optimization: for t = 1..T sample, score, pair,
/// train. Stops early when an iteration yields no pairs. The log is
/// persisted after every iteration, so a trainer failure at t leaves the
/// states for 1..t−1 on disk.
pub fn iterate(
    setup: &LoopSetup<'_>,
    backend_factory: &mut dyn FnMut(usize) -> Result<Arc<dyn RewriteBackend>>,
    trainer: &mut dyn TrainerHook,
) -> Result<Vec<IterationState>> {
    if setup.iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let mut states: Vec<IterationState> = Vec::new();
    let persist = |states: &[IterationState]| -> Result<()> {
        match setup.out_dir {
            Some(dir) => jsonl::write_json(&dir.join("iteration_log.json"), &states),
            None => Ok(()),
        }
    };
    for t in 1..=setup.iterations {
        let backend = backend_factory(t)?;
        let ds = collect_pairs(setup.records, setup.corpus, backend.as_ref(), setup.prompt, setup.retriever, setup.n)?;
        let pairs_path = match setup.out_dir {
            Some(dir) => {
                let p = dir.join(format!("pairs_iter{t}.jsonl"));
                save_pairs(&p, &ds.pairs)?;
                Some(p)
            }
            None => None,
        };
        let state = IterationState {
            iteration: t,
            backend: backend.tag(),
            pairs: ds.pairs.len(),
            mean_score: ds.summary.mean_score,
            summary: ds.summary.clone(),
            pairs_path: pairs_path.as_ref().map(|_| PathBuf::from(format!("pairs_iter{t}.jsonl"))),
        };
        log::info!(
            "iteration {t}: {} pairs, mean score {:.4}",
            state.pairs,
            state.mean_score
        );
        if ds.pairs.is_empty() {
            log::warn!("iteration {t} produced no pairs; stopping");
            states.push(state);
            persist(&states)?;
            break;
        }
        if let Err(e) = trainer.train(t, &ds.pairs, pairs_path.as_deref()) {
            persist(&states)?;
            return Err(e);
        }
        states.push(state);
        persist(&states)?;
    }
    Ok(states)
}
