//! Experiment orchestration: vague-vs-specific degradation, rewrite-then-
//! retrieve evaluation, the supervised-vs-preference ablation, and a
//! config-driven pipeline over the individual stages.
//!
//! Every run is a function of its config, seed, and generation cache.
//! Reports carry no timestamps, so repeated runs write identical bytes.

pub mod output;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use output::RunDir;
pub use synthetic::{gen_synthetic, name_overlap, write_synthetic, SyntheticSpec};

use crate::corpus::{load_corpus, load_queries, require_specific, Corpus, QueryRecord, SubsetTag};
use crate::dpo::{self, DpoBatch, TabularPolicy, ToyBackend};
use crate::error::{Error, Result};
use crate::metrics::{compare, evaluate_query, render_markdown, DeltaRow, EvalReport, NdcgConfig, QueryEval, TableRow};
use crate::preference::{
    build_dpo_dataset, iterate, save_pairs, CommandHook, DatasetSummary, IterationState, LoopSetup, NoTraining,
    PreferencePair, TrainerHook,
};
use crate::retrieval::{build_retriever, Retriever, RetrieverConfig};
use crate::rewriter::{build_backend, sample_candidates, BackendConfig, BackendKind, RewriteBackend, RewritePrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Rewrite,
    Pairs,
    Train,
    Iterate,
}

/// Step counts and learning rates for the tabular policy.
///
/// Both losses are batch means and every prompt owns its logits, so a raw
/// step would shrink with the number of rows. The rates here are per row:
/// the trainer multiplies them by the row count, which makes the step a
/// prompt sees independent of how many queries the run has.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub dpo_steps: usize,
    pub dpo_lr: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sft_steps: 50,
            sft_lr: 0.05,
            dpo_steps: 50,
            dpo_lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// Used when `corpus` and `queries` are absent.
    pub synthetic: Option<SyntheticSpec>,
    pub retriever: RetrieverConfig,
    pub backend: BackendConfig,
    /// Custom enhancement template; the bundled one otherwise.
    pub template: Option<PathBuf>,
    pub n: usize,
    pub cutoffs: Vec<usize>,
    /// Pick the rewrite whose top retrieval score is highest instead of
    /// taking a single sample.
    pub best_of_n: bool,
    pub beta: f64,
    pub iterations: usize,
    pub toy: ToyConfig,
    pub stages: Vec<Stage>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// External trainer for non-toy backends: program followed by arguments,
    /// with `{pairs}` and `{iteration}` substituted.
    pub trainer_command: Option<Vec<String>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            queries: None,
            synthetic: None,
            retriever: RetrieverConfig::default(),
            backend: BackendConfig::default(),
            template: None,
            n: 4,
            cutoffs: vec![5, 10],
            best_of_n: false,
            beta: dpo::DEFAULT_BETA,
            iterations: 1,
            toy: ToyConfig::default(),
            stages: vec![Stage::Baseline],
            out: None,
            workers: None,
            trainer_command: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(config_field(&e), e.to_string()))
    }

    /// Checks every field, naming the offending one in the error.
    pub fn validate(&self) -> Result<()> {
        match (&self.corpus, &self.queries) {
            (Some(_), Some(_)) => {}
            (None, None) if self.synthetic.is_some() => {}
            (None, None) => return Err(Error::config("corpus", "set corpus and queries, or synthetic")),
            (None, Some(_)) => return Err(Error::config("corpus", "required when queries is set")),
            (Some(_), None) => return Err(Error::config("queries", "required when corpus is set")),
        }
        for (field, path) in [("corpus", &self.corpus), ("queries", &self.queries), ("template", &self.template)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        NdcgConfig::new(self.cutoffs.clone()).map_err(|e| Error::config("cutoffs", e.to_string()))?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.retriever.alpha) {
            return Err(Error::config("retriever.alpha", "must lie in [0, 1]"));
        }
        self.retriever
            .bm25
            .validate()
            .map_err(|e| Error::config("retriever.bm25", e.to_string()))?;
        self.backend.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("stages", "must not be empty"));
        }
        if self.stages.contains(&Stage::Train) && !self.stages.contains(&Stage::Pairs) {
            return Err(Error::config("stages", "train requires pairs"));
        }
        if self.stages.iter().any(|s| matches!(s, Stage::Pairs | Stage::Iterate)) && self.n < 2 {
            return Err(Error::config("n", "pair construction needs at least 2 candidates"));
        }
        for (field, v) in [("toy.sft_lr", self.toy.sft_lr), ("toy.dpo_lr", self.toy.dpo_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if matches!(&self.trainer_command, Some(c) if c.is_empty()) {
            return Err(Error::config("trainer_command", "must name a program"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn prompt(&self) -> Result<RewritePrompt> {
        match &self.template {
            Some(p) => RewritePrompt::from_file(p),
            None => Ok(RewritePrompt::enhancement()),
        }
    }
}

/// Best-effort field name from a serde error message such as
/// "unknown field `foo`" or "invalid type ... at line 3".
fn config_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<root>".into())
}

/// Loaded data plus a built retriever.
pub struct Workspace {
    pub corpus: Corpus,
    pub records: Vec<QueryRecord>,
    pub retriever: Arc<dyn Retriever>,
    pub ndcg: NdcgConfig,
}

impl Workspace {
    pub fn new(corpus: Corpus, records: Vec<QueryRecord>, retriever: &RetrieverConfig, cutoffs: Vec<usize>) -> Result<Self> {
        let retriever = build_retriever(retriever, &corpus)?;
        Ok(Self {
            corpus,
            records,
            retriever,
            ndcg: NdcgConfig::new(cutoffs)?,
        })
    }

    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (corpus, records) = match (&config.corpus, &config.queries, &config.synthetic) {
            (Some(c), Some(q), _) => {
                let corpus = load_corpus(c)?;
                let records = load_queries(q, &corpus)?;
                (corpus, records)
            }
            (None, None, Some(spec)) => gen_synthetic(spec)?,
            _ => return Err(Error::config("corpus", "set corpus and queries, or synthetic")),
        };
        Self::new(corpus, records, &config.retriever, config.cutoffs.clone())
    }

    /// Same data with a different retriever.
    pub fn with_retriever(&self, retriever: &RetrieverConfig) -> Result<Self> {
        Self::new(self.corpus.clone(), self.records.clone(), retriever, self.ndcg.cutoffs.clone())
    }

    pub fn vague_texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.vague.clone()).collect()
    }

    pub fn specific_texts(&self) -> Result<Vec<String>> {
        require_specific(&self.records)?;
        Ok(self.records.iter().map(|r| r.specific.clone().expect("checked")).collect())
    }

    /// Evaluates `texts[i]` as the query for `records[i]`.
    pub fn evaluate(&self, label: &str, texts: &[String]) -> Result<EvalReport> {
        if texts.len() != self.records.len() {
            return Err(Error::invalid("one query text per record is required"));
        }
        let per_query = self
            .records
            .par_iter()
            .zip(texts)
            .map(|(r, text)| {
                let gt: HashSet<String> = self.corpus.ground_truth_ids(r)?;
                let s = evaluate_query(self.retriever.as_ref(), &r.query_id, text, &gt, &self.ndcg)?;
                Ok(QueryEval {
                    query_id: r.query_id.clone(),
                    subset: r.subset,
                    ndcg: s.ndcg,
                    avg: s.avg,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::new(label, self.retriever.name(), self.ndcg.cutoffs.clone(), per_query))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub specific: EvalReport,
    pub vague: EvalReport,
    /// Vague relative to specific.
    pub delta: Vec<DeltaRow>,
}

pub fn run_degradation(ws: &Workspace) -> Result<DegradationReport> {
    let specific = ws.evaluate("specific", &ws.specific_texts()?)?;
    let vague = ws.evaluate("vague", &ws.vague_texts())?;
    let delta = compare(&vague, &specific)?;
    Ok(DegradationReport { specific, vague, delta })
}

/// The rewrite used for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rewrite {
    pub query_id: String,
    pub candidate_index: usize,
    pub text: String,
    pub fell_back: bool,
}

/// Picks one rewrite per record. With `best_of_n`, all `n` candidates are
/// sampled and the one whose best retrieval score is highest wins (no ground
/// truth involved; ties go to the lower index). Otherwise one sample is used.
pub fn rewrite_queries(
    ws: &Workspace,
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    n: usize,
    best_of_n: bool,
) -> Result<Vec<Rewrite>> {
    let draws = if best_of_n { n.max(1) } else { 1 };
    ws.records
        .par_iter()
        .map(|r| {
            let cands = sample_candidates(backend, prompt, r, draws)?;
            let mut pick = 0;
            if draws > 1 {
                let mut best = f64::NEG_INFINITY;
                for (i, c) in cands.iter().enumerate().filter(|(_, c)| !c.is_failed()) {
                    let top = ws
                        .retriever
                        .score_all(&c.text)?
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max);
                    if top > best {
                        best = top;
                        pick = i;
                    }
                }
            }
            let c = &cands[pick];
            Ok(Rewrite {
                query_id: r.query_id.clone(),
                candidate_index: c.candidate_index,
                text: c.text.clone(),
                fell_back: c.is_failed(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrbReport {
    pub backend: String,
    pub baseline: EvalReport,
    pub rewritten: EvalReport,
    /// Rewritten relative to the vague baseline.
    pub delta: Vec<DeltaRow>,
    pub queries_total: usize,
    pub rewritten_count: usize,
    pub fell_back: usize,
    pub rewrites: Vec<Rewrite>,
}

impl TrbReport {
    /// `queries_total = rewritten_count + fell_back`.
    pub fn balanced(&self) -> bool {
        self.queries_total == self.rewritten_count + self.fell_back
    }
}

pub fn run_trb(
    ws: &Workspace,
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    n: usize,
    best_of_n: bool,
) -> Result<TrbReport> {
    let baseline = ws.evaluate("vague", &ws.vague_texts())?;
    let rewrites = rewrite_queries(ws, backend, prompt, n, best_of_n)?;
    let texts: Vec<String> = rewrites.iter().map(|r| r.text.clone()).collect();
    let rewritten = ws.evaluate(&format!("rewritten ({})", backend.tag()), &texts)?;
    let delta = compare(&rewritten, &baseline)?;
    let fell_back = rewrites.iter().filter(|r| r.fell_back).count();
    Ok(TrbReport {
        backend: backend.tag(),
        queries_total: rewrites.len(),
        rewritten_count: rewrites.len() - fell_back,
        fell_back,
        baseline,
        rewritten,
        delta,
        rewrites,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub label: String,
    pub backend: String,
    pub report: EvalReport,
    pub delta: Vec<DeltaRow>,
    pub fell_back: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: EvalReport,
    pub arms: Vec<AblationArm>,
}

/// Evaluates each backend's greedy rewrite side by side with the vague
/// baseline.
pub fn run_ablation(
    ws: &Workspace,
    prompt: &RewritePrompt,
    arms: &[(String, Arc<dyn RewriteBackend>)],
) -> Result<AblationReport> {
    let baseline = ws.evaluate("baseline", &ws.vague_texts())?;
    let arms = arms
        .iter()
        .map(|(label, backend)| {
            let rewrites = rewrite_queries(ws, backend.as_ref(), prompt, 1, false)?;
            let texts: Vec<String> = rewrites.iter().map(|r| r.text.clone()).collect();
            let report = ws.evaluate(label, &texts)?;
            Ok(AblationArm {
                label: label.clone(),
                backend: backend.tag(),
                delta: compare(&report, &baseline)?,
                fell_back: rewrites.iter().filter(|r| r.fell_back).count(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { baseline, arms })
}

/// Trains the shared tabular policy on each iteration's pairs, with the
/// reference reset to the policy as it was when the iteration began.
pub struct ToyTrainer {
    policy: Arc<Mutex<TabularPolicy>>,
    beta: f64,
    steps: usize,
    lr: f64,
    out_dir: Option<PathBuf>,
    pub losses: Vec<Vec<f64>>,
}

impl ToyTrainer {
    pub fn new(policy: Arc<Mutex<TabularPolicy>>, beta: f64, steps: usize, lr: f64, out_dir: Option<PathBuf>) -> Self {
        Self {
            policy,
            beta,
            steps,
            lr,
            out_dir,
            losses: Vec::new(),
        }
    }
}

/// One DPO training pass from `policy` on `pairs`, reference = `policy`.
pub fn train_on_pairs(
    policy: &TabularPolicy,
    pairs: &[PreferencePair],
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<dpo::TrainOutcome> {
    let mut current = policy.clone();
    let mut reference = policy.clone();
    let rows = dpo::intern_pairs(&mut current, &mut reference, pairs);
    let scaled = lr * rows.len() as f64;
    let batch = DpoBatch::new(rows, beta)?;
    dpo::train_toy(&current, &reference, &batch, steps, scaled)
}

impl TrainerHook for ToyTrainer {
    fn train(&mut self, iteration: usize, pairs: &[PreferencePair], _: Option<&Path>) -> Result<()> {
        let mut guard = self.policy.lock().expect("policy lock poisoned");
        let out = train_on_pairs(&guard, pairs, self.beta, self.steps, self.lr).map_err(|e| Error::TrainerHook {
            iteration,
            message: e.to_string(),
        })?;
        if let Some(dir) = &self.out_dir {
            crate::jsonl::write_atomic(&dir.join(format!("training_log_iter{iteration}.csv")), out.log_csv().as_bytes())?;
        }
        self.losses.push(out.losses);
        *guard = out.policy;
        Ok(())
    }
}

/// Supervised warm-up on the toy universe: every record's specific text is
/// the target.
pub fn toy_sft_policy(records: &[QueryRecord], n: usize, toy: &ToyConfig) -> Result<TabularPolicy> {
    let universe = dpo::toy_universe(records, n);
    let rows = dpo::sft_rows(&universe, records);
    if rows.is_empty() {
        return Ok(universe);
    }
    let scaled = toy.sft_lr * rows.len() as f64;
    Ok(dpo::train_sft(&universe, &rows, toy.sft_steps, scaled)?.policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLoopReport {
    pub iterations: Vec<IterationState>,
    /// Baseline / supervised-only / supervised + preference rows.
    pub ablation: AblationReport,
}

pub struct ToyLoopOutcome {
    pub sft_policy: TabularPolicy,
    pub final_policy: TabularPolicy,
    pub report: ToyLoopReport,
}

pub struct ToyLoopSettings<'a> {
    pub n: usize,
    pub iterations: usize,
    pub beta: f64,
    pub toy: &'a ToyConfig,
    pub seed: u64,
    /// Start from this policy instead of a fresh supervised warm-up.
    pub initial: Option<TabularPolicy>,
    pub out_dir: Option<&'a Path>,
}

/// The fully offline closed loop: warm-up, `T` rounds of sample → score →
/// pair → DPO on the tabular policy, then the ablation table.
pub fn run_toy_loop(ws: &Workspace, prompt: &RewritePrompt, s: ToyLoopSettings<'_>) -> Result<ToyLoopOutcome> {
    let sft_policy = match s.initial {
        Some(p) => p,
        None => toy_sft_policy(&ws.records, s.n, s.toy)?,
    };
    let shared = Arc::new(Mutex::new(sft_policy.clone()));
    let mut trainer = ToyTrainer::new(shared.clone(), s.beta, s.toy.dpo_steps, s.toy.dpo_lr, s.out_dir.map(Path::to_path_buf));
    let seed = s.seed;
    let factory_policy = shared.clone();
    let mut factory = move |t: usize| -> Result<Arc<dyn RewriteBackend>> {
        let snapshot = factory_policy.lock().expect("policy lock poisoned").clone();
        Ok(Arc::new(ToyBackend::new(Arc::new(snapshot), seed).with_label(format!("toy@iter{t}"))))
    };
    let setup = LoopSetup {
        records: &ws.records,
        corpus: &ws.corpus,
        prompt,
        retriever: ws.retriever.as_ref(),
        n: s.n,
        iterations: s.iterations,
        out_dir: s.out_dir,
    };
    let iterations = iterate(&setup, &mut factory, &mut trainer)?;
    let final_policy = shared.lock().expect("policy lock poisoned").clone();
    let arms: Vec<(String, Arc<dyn RewriteBackend>)> = vec![
        (
            "-w/ SFT-only".into(),
            Arc::new(ToyBackend::new(Arc::new(sft_policy.clone()), seed).with_label("toy@sft")),
        ),
        (
            "-w/ Full".into(),
            Arc::new(ToyBackend::new(Arc::new(final_policy.clone()), seed).with_label("toy@full")),
        ),
    ];
    let ablation = run_ablation(ws, prompt, &arms)?;
    Ok(ToyLoopOutcome {
        sft_policy,
        final_policy,
        report: ToyLoopReport { iterations, ablation },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub pairs: usize,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Everything a run can write to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "report", rename_all = "snake_case")]
pub enum HarnessReport {
    Eval(EvalReport),
    Degradation(DegradationReport),
    Trb(TrbReport),
    Ablation(AblationReport),
    Pairs(DatasetSummary),
    Training(TrainingSummary),
    Iterate(Vec<IterationState>),
    ToyLoop(ToyLoopReport),
    Pipeline(Vec<HarnessReport>),
}

#[derive(Serialize)]
struct PerQueryRow<'a> {
    report: &'a str,
    #[serde(flatten)]
    row: &'a QueryEval,
}

fn push_scores<'a>(rows: &mut Vec<TableRow<'a>>, r: &'a EvalReport) {
    rows.push(TableRow::Scores {
        label: r.label.clone(),
        report: r,
    });
}

fn iteration_table(states: &[IterationState]) -> String {
    let mut out = String::from("### Iterations\n\n| t | backend | pairs | dropped (equal) | mean Score |\n|---:|---|---:|---:|---:|\n");
    for s in states {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} |",
            s.iteration, s.backend, s.pairs, s.summary.dropped_equal, s.mean_score
        );
    }
    out
}

fn ablation_reports(a: &AblationReport) -> Vec<&EvalReport> {
    std::iter::once(&a.baseline).chain(a.arms.iter().map(|x| &x.report)).collect()
}

fn ablation_md(a: &AblationReport) -> String {
    let mut rows = Vec::new();
    push_scores(&mut rows, &a.baseline);
    for arm in &a.arms {
        push_scores(&mut rows, &arm.report);
    }
    for arm in &a.arms {
        rows.push(TableRow::Delta {
            label: format!("{} %Δ", arm.label),
            deltas: &arm.delta,
        });
    }
    render_markdown(&format!("Ablation ({})", a.baseline.retriever), &rows)
}

impl HarnessReport {
    pub fn eval_reports(&self) -> Vec<&EvalReport> {
        match self {
            HarnessReport::Eval(r) => vec![r],
            HarnessReport::Degradation(d) => vec![&d.specific, &d.vague],
            HarnessReport::Trb(t) => vec![&t.baseline, &t.rewritten],
            HarnessReport::Ablation(a) => ablation_reports(a),
            HarnessReport::ToyLoop(l) => ablation_reports(&l.ablation),
            HarnessReport::Pipeline(p) => p.iter().flat_map(|r| r.eval_reports()).collect(),
            HarnessReport::Pairs(_) | HarnessReport::Training(_) | HarnessReport::Iterate(_) => Vec::new(),
        }
    }

    /// Recomputes every aggregate from its per-query rows.
    pub fn audit(&self) -> bool {
        self.eval_reports().iter().all(|r| r.audit())
    }

    pub fn to_markdown(&self) -> String {
        match self {
            HarnessReport::Eval(r) => {
                let mut rows = Vec::new();
                push_scores(&mut rows, r);
                render_markdown(&format!("Evaluation ({})", r.retriever), &rows)
            }
            HarnessReport::Degradation(d) => {
                let mut rows = Vec::new();
                push_scores(&mut rows, &d.specific);
                push_scores(&mut rows, &d.vague);
                rows.push(TableRow::Delta {
                    label: "%Δ".into(),
                    deltas: &d.delta,
                });
                render_markdown(&format!("Specific vs vague ({})", d.vague.retriever), &rows)
            }
            HarnessReport::Trb(t) => {
                let mut rows = Vec::new();
                push_scores(&mut rows, &t.baseline);
                push_scores(&mut rows, &t.rewritten);
                rows.push(TableRow::Delta {
                    label: "%Δ↑".into(),
                    deltas: &t.delta,
                });
                let mut md = render_markdown(&format!("Rewrite then retrieve ({})", t.baseline.retriever), &rows);
                let _ = writeln!(
                    md,
                    "\nqueries: {}, rewritten: {}, fell back to vague text: {}",
                    t.queries_total, t.rewritten_count, t.fell_back
                );
                md
            }
            HarnessReport::Ablation(a) => ablation_md(a),
            HarnessReport::Pairs(s) => format!(
                "### Preference pairs\n\n| records | pairs | dropped (equal) | dropped (insufficient) | failed candidates | mean Score | mean chosen | mean rejected |\n|---:|---:|---:|---:|---:|---:|---:|---:|\n| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
                s.records, s.pairs, s.dropped_equal, s.dropped_insufficient, s.failed_candidates, s.mean_score, s.mean_score_chosen, s.mean_score_rejected
            ),
            HarnessReport::Training(t) => format!(
                "### Toy training\n\npairs: {}, steps: {}, loss: {} → {}\n",
                t.pairs,
                t.steps,
                t.initial_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                t.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
            ),
            HarnessReport::Iterate(states) => iteration_table(states),
            HarnessReport::ToyLoop(l) => format!("{}\n{}", iteration_table(&l.iterations), ablation_md(&l.ablation)),
            HarnessReport::Pipeline(p) => p.iter().map(|r| r.to_markdown()).collect::<Vec<_>>().join("\n"),
        }
    }

    /// Writes `report.json`, `report.md`, `per_query.jsonl`, and
    /// `run_config.json` into `dir`.
    pub fn write<C: Serialize>(&self, dir: &RunDir, config: &C) -> Result<()> {
        dir.write_json(output::RUN_CONFIG, config)?;
        let rows: Vec<PerQueryRow<'_>> = self
            .eval_reports()
            .into_iter()
            .flat_map(|r| r.per_query.iter().map(move |row| PerQueryRow { report: &r.label, row }))
            .collect();
        dir.write_jsonl(output::PER_QUERY, &rows)?;
        dir.write_text(output::REPORT_MD, &self.to_markdown())?;
        dir.write_json(output::REPORT_JSON, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::jsonl::read_json(path)
    }
}

/// Builds the configured backend. A toy backend without a policy file gets
/// a fresh supervised warm-up policy.
pub fn backend_for(config: &ExperimentConfig, ws: &Workspace) -> Result<Arc<dyn RewriteBackend>> {
    if config.backend.kind == BackendKind::Toy && config.backend.policy.is_none() {
        let policy = toy_sft_policy(&ws.records, config.n, &config.toy)?;
        return Ok(Arc::new(ToyBackend::new(Arc::new(policy), config.backend.seed).with_label("toy@sft")));
    }
    build_backend(&config.backend)
}

fn initial_toy_policy(config: &ExperimentConfig, ws: &Workspace) -> Result<TabularPolicy> {
    match &config.backend.policy {
        Some(p) => TabularPolicy::load(p),
        None => toy_sft_policy(&ws.records, config.n, &config.toy),
    }
}

/// Runs the configured stages in pipeline order.
pub fn run_pipeline(config: &ExperimentConfig, dir: Option<&RunDir>) -> Result<HarnessReport> {
    config.validate()?;
    let ws = Workspace::load(config)?;
    let prompt = config.prompt()?;
    let mut stages = config.stages.clone();
    stages.sort();
    stages.dedup();

    let mut reports = Vec::new();
    let mut pairs: Option<Vec<PreferencePair>> = None;
    for stage in stages {
        log::info!("stage {stage:?}");
        match stage {
            Stage::Baseline => {
                if ws.records.iter().all(|r| r.specific.is_some()) {
                    reports.push(HarnessReport::Degradation(run_degradation(&ws)?));
                } else {
                    reports.push(HarnessReport::Eval(ws.evaluate("vague", &ws.vague_texts())?));
                }
            }
            Stage::Rewrite => {
                let backend = backend_for(config, &ws)?;
                reports.push(HarnessReport::Trb(run_trb(&ws, backend.as_ref(), &prompt, config.n, config.best_of_n)?));
            }
            Stage::Pairs => {
                let backend = backend_for(config, &ws)?;
                let ds = build_dpo_dataset(&ws.records, &ws.corpus, backend.as_ref(), &prompt, ws.retriever.as_ref(), config.n)?;
                if let Some(d) = dir {
                    save_pairs(&d.join("pairs.jsonl"), &ds.pairs)?;
                }
                reports.push(HarnessReport::Pairs(ds.summary));
                pairs = Some(ds.pairs);
            }
            Stage::Train => {
                let pairs = pairs.as_deref().ok_or_else(|| Error::config("stages", "train requires pairs"))?;
                let start = initial_toy_policy(config, &ws)?;
                let out = train_on_pairs(&start, pairs, config.beta, config.toy.dpo_steps, config.toy.dpo_lr)?;
                if let Some(d) = dir {
                    out.policy.save(&d.join("policy.json"))?;
                    d.write_text("training_log.csv", &out.log_csv())?;
                }
                reports.push(HarnessReport::Training(TrainingSummary {
                    pairs: pairs.len(),
                    steps: out.losses.len(),
                    initial_loss: out.losses.first().copied(),
                    final_loss: out.losses.last().copied(),
                }));
            }
            Stage::Iterate => reports.push(run_iterate_stage(config, &ws, &prompt, dir)?),
        }
    }
    Ok(if reports.len() == 1 {
        reports.pop().expect("one report")
    } else {
        HarnessReport::Pipeline(reports)
    })
}

/// The iterative loop: fully offline with the toy backend, otherwise the
/// configured backend with an optional external trainer between rounds.
pub fn run_iterate_stage(
    config: &ExperimentConfig,
    ws: &Workspace,
    prompt: &RewritePrompt,
    dir: Option<&RunDir>,
) -> Result<HarnessReport> {
    if config.backend.kind == BackendKind::Toy {
        let initial = match &config.backend.policy {
            Some(p) => Some(TabularPolicy::load(p)?),
            None => None,
        };
        let outcome = run_toy_loop(
            ws,
            prompt,
            ToyLoopSettings {
                n: config.n,
                iterations: config.iterations,
                beta: config.beta,
                toy: &config.toy,
                seed: config.backend.seed,
                initial,
                out_dir: dir.map(RunDir::path),
            },
        )?;
        if let Some(d) = dir {
            outcome.sft_policy.save(&d.join("policy_sft.json"))?;
            outcome.final_policy.save(&d.join("policy.json"))?;
        }
        return Ok(HarnessReport::ToyLoop(outcome.report));
    }
    let backend = build_backend(&config.backend)?;
    let mut factory = move |_: usize| -> Result<Arc<dyn RewriteBackend>> { Ok(backend.clone()) };
    let mut hook: Box<dyn TrainerHook> = match &config.trainer_command {
        Some(cmd) => Box::new(CommandHook {
            program: cmd[0].clone(),
            args: cmd[1..].to_vec(),
        }),
        None => Box::new(NoTraining),
    };
    let setup = LoopSetup {
        records: &ws.records,
        corpus: &ws.corpus,
        prompt,
        retriever: ws.retriever.as_ref(),
        n: config.n,
        iterations: config.iterations,
        out_dir: dir.map(RunDir::path),
    };
    Ok(HarnessReport::Iterate(iterate(&setup, &mut factory, hook.as_mut())?))
}

/// Number of records per subset, in report order.
pub fn subset_counts(records: &[QueryRecord]) -> Vec<(SubsetTag, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for r in records {
        *counts.entry(r.subset).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}
