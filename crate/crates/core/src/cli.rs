//! Command-line front end.
//!
//! Every subcommand resolves one [`ExperimentConfig`]: the `--config` file
//! if given, then flag overrides on top. The resolved config is echoed to
//! stderr as one JSON line and, for commands that write a run directory,
//! saved as `run_config.json`.
//!
//! Exit codes: 0 on success, 2 for usage or config errors, 1 for runtime
//! failures. Failures print one line to stderr:
//! `error kind=<kind> [field=<path>] message=<json string>`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, load_corpus, save_queries, validate_query, Corpus, SubsetTag};
use crate::dpo::TabularPolicy;
use crate::error::{Error, Result};
use crate::harness::{
    backend_for, gen_synthetic, output, run_pipeline, toy_sft_policy, train_on_pairs, write_synthetic, ExperimentConfig,
    HarnessReport, RunDir, Stage, SyntheticSpec, TrainingSummary, Workspace,
};
use crate::jsonl;
use crate::preference::{load_pairs, score_all};
use crate::retrieval::{
    build_embedder, build_retriever, Bm25Index, DenseRetriever, IndexSnapshot, Retriever, RetrieverKind, TfidfIndex,
};
use crate::rewriter::{sample_batch, BackendKind, CandidateRewrite};

#[derive(Debug, Parser)]
#[command(name = "toolbridge", version, about = "Tool retrieval evaluation and preference-data pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching field
/// of the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON experiment config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Tool corpus (`tools.jsonl`).
    #[arg(long, global = true, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Query file (`queries.jsonl`).
    #[arg(long, global = true, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    /// Use the seeded synthetic corpus when no corpus/queries are given.
    #[arg(long, global = true)]
    pub synthetic: bool,
    /// Retriever: bm25, tfidf, dense or hybrid.
    #[arg(long, global = true, value_name = "KIND")]
    pub retriever: Option<RetrieverKind>,
    /// NDCG cutoffs (comma separated); `retrieve` returns as many documents as the largest.
    #[arg(long, global = true, value_delimiter = ',', value_name = "K")]
    pub k: Option<Vec<usize>>,
    /// Candidates sampled per query [default: 4].
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// DPO temperature [default: 0.1].
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Preference-optimization rounds for `iterate` [default: 1].
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Rewriter backend: http, mock, toy or identity.
    #[arg(long, global = true, value_name = "KIND")]
    pub backend: Option<BackendKind>,
    /// Backend sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads [default: number of cores].
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Rewriter endpoint for the http backend.
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Generation cache directory for the http backend.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Toy policy file for the toy backend.
    #[arg(long, global = true, value_name = "FILE")]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the retriever over the corpus and save an index snapshot.
    Index {
        /// Snapshot path [default: <out>/index.json].
        #[arg(long, value_name = "FILE")]
        snapshot: Option<PathBuf>,
    },
    /// Retrieve the top documents for one query and print them as JSON.
    Retrieve {
        /// Query text.
        #[arg(long)]
        query: String,
        /// Identifier echoed in the output.
        #[arg(long, default_value = "q")]
        query_id: String,
        /// Load this snapshot instead of building the retriever.
        #[arg(long, value_name = "FILE")]
        snapshot: Option<PathBuf>,
    },
    /// Evaluate vague queries, and specific ones when every record has them.
    Eval,
    /// Sample candidate rewrites for every query.
    Rewrite,
    /// Score candidate rewrites by retrieval quality.
    Score {
        /// Candidates file (JSONL); sampled from the backend when absent.
        #[arg(long, value_name = "FILE")]
        candidates: Option<PathBuf>,
    },
    /// Build the preference-pair dataset.
    Pairs,
    /// Train the tabular toy policy on a pairs file.
    TrainToy {
        /// Pairs file (JSONL).
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
    },
    /// Run the iterative sample, score, pair and train loop.
    Iterate,
    /// Generate a synthetic corpus and query set.
    Synth {
        /// Number of tools.
        #[arg(long, default_value_t = SyntheticSpec::default().tools)]
        tools: usize,
        /// Number of queries.
        #[arg(long, default_value_t = SyntheticSpec::default().queries)]
        num_queries: usize,
        /// Largest ground-truth size per query.
        #[arg(long, default_value_t = SyntheticSpec::default().max_tools_per_query)]
        max_tools_per_query: usize,
        /// Intent vocabulary size.
        #[arg(long, default_value_t = SyntheticSpec::default().vocab_size)]
        vocab_size: usize,
        /// Number of tool categories.
        #[arg(long, default_value_t = SyntheticSpec::default().categories)]
        categories: usize,
    },
    /// Re-render report.md from a run directory's report.json.
    Report {
        /// Run directory or report.json path.
        #[arg(long, value_name = "PATH")]
        from: PathBuf,
    },
    /// Convert ToolBench files into tools.jsonl and queries.jsonl.
    Convert {
        /// Tool source: directory of tool JSON files, corpus.tsv, or a query file.
        #[arg(long, value_name = "PATH")]
        tools_input: PathBuf,
        /// ToolBench query file.
        #[arg(long, value_name = "FILE")]
        queries_input: Option<PathBuf>,
        /// Subset tag for the converted queries (I1, I2, I3).
        #[arg(long, value_name = "TAG")]
        subset: Option<String>,
        /// Field holding a vague rewrite of each query.
        #[arg(long, value_name = "NAME")]
        vague_field: Option<String>,
    },
    /// Run the configured pipeline stages.
    Run {
        /// Stages to run (comma separated): baseline, rewrite, pairs, train, iterate.
        #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
        stages: Option<Vec<Stage>>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown stage {s:?}"))
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage message={}", quote(&first));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// The one-line, machine-parsable rendering of an error.
pub fn error_line(e: &Error) -> String {
    match e {
        Error::Config { field, message } => format!("error kind=config field={field} message={}", quote(message)),
        other => format!("error kind={} message={}", other.kind(), quote(&other.to_string())),
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| format!("{s:?}"))
}

/// Applies the flag overrides to the config file (or the defaults).
pub fn resolve(o: &Overrides) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(p) if !p.exists() => return Err(Error::config("config", format!("{} does not exist", p.display()))),
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if o.corpus.is_some() || o.queries.is_some() {
        c.corpus = o.corpus.clone().or(c.corpus);
        c.queries = o.queries.clone().or(c.queries);
    }
    if o.synthetic && c.synthetic.is_none() {
        c.synthetic = Some(SyntheticSpec::default());
    }
    if let Some(kind) = o.retriever {
        c.retriever.kind = kind;
    }
    if let Some(k) = &o.k {
        c.cutoffs = k.clone();
    }
    if let Some(n) = o.n {
        c.n = n;
    }
    if let Some(beta) = o.beta {
        c.beta = beta;
    }
    if let Some(t) = o.iterations {
        c.iterations = t;
    }
    if let Some(kind) = o.backend {
        c.backend.kind = kind;
    }
    if let Some(seed) = o.seed {
        c.backend.seed = seed;
    }
    if let Some(out) = &o.out {
        c.out = Some(out.clone());
    }
    if let Some(w) = o.workers {
        c.workers = Some(w);
    }
    if let Some(e) = &o.endpoint {
        c.backend.endpoint = Some(e.clone());
    }
    if let Some(d) = &o.cache_dir {
        c.backend.cache_dir = Some(d.clone());
    }
    if let Some(p) = &o.policy {
        c.backend.policy = Some(p.clone());
    }
    Ok(c)
}

fn echo(config: &ExperimentConfig) {
    match serde_json::to_string(config) {
        Ok(s) => eprintln!("resolved config: {s}"),
        Err(e) => log::warn!("could not echo config: {e}"),
    }
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    // a second call in the same process keeps the first pool
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("global thread pool already set: {e}");
    }
    Ok(())
}

fn out_dir(c: &ExperimentConfig) -> Result<Option<RunDir>> {
    c.out.as_deref().map(RunDir::acquire).transpose()
}

fn require_out(c: &ExperimentConfig) -> Result<RunDir> {
    out_dir(c)?.ok_or_else(|| Error::config("out", "this command writes files and needs --out"))
}

fn print_stdout(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .and_then(|_| if text.ends_with('\n') { Ok(()) } else { stdout.write_all(b"\n") })
        .or_else(|e| match e.kind() {
            // a closed pipe (`| head`) is the reader's choice, not a failure
            std::io::ErrorKind::BrokenPipe => Ok(()),
            _ => Err(Error::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            }),
        })
}

fn emit_jsonl<T: serde::Serialize>(rows: &[T], dir: Option<&RunDir>, name: &str) -> Result<()> {
    match dir {
        Some(d) => {
            d.write_jsonl(name, rows)?;
            eprintln!("wrote {}", d.join(name).display());
            Ok(())
        }
        None => print_stdout(&jsonl::to_string(rows)?),
    }
}

/// Runs `stages` through the harness and writes the run directory.
fn pipeline(mut c: ExperimentConfig, stages: Vec<Stage>) -> Result<()> {
    c.stages = stages;
    c.validate()?;
    echo(&c);
    init_workers(c.workers)?;
    let dir = out_dir(&c)?;
    let report = run_pipeline(&c, dir.as_ref())?;
    if let Some(d) = &dir {
        report.write(d, &c)?;
        eprintln!("wrote {}", d.join(output::REPORT_JSON).display());
    }
    print_stdout(&report.to_markdown())
}

/// Checks only what commands that need a corpus but no queries rely on.
fn validate_corpus_only(c: &ExperimentConfig) -> Result<()> {
    match (&c.corpus, &c.synthetic) {
        (Some(p), _) if !p.exists() => Err(Error::config("corpus", format!("{} does not exist", p.display()))),
        (Some(_), _) | (None, Some(_)) => Ok(()),
        (None, None) => Err(Error::config("corpus", "set --corpus or --synthetic")),
    }?;
    if !(0.0..=1.0).contains(&c.retriever.alpha) {
        return Err(Error::config("retriever.alpha", "must lie in [0, 1]"));
    }
    c.retriever
        .bm25
        .validate()
        .map_err(|e| Error::config("retriever.bm25", e.to_string()))
}

fn corpus_only(c: &ExperimentConfig) -> Result<Corpus> {
    match (&c.corpus, &c.synthetic) {
        (Some(p), _) => load_corpus(p),
        (None, Some(spec)) => Ok(gen_synthetic(spec)?.0),
        (None, None) => Err(Error::config("corpus", "set --corpus or --synthetic")),
    }
}

fn snapshot_of(c: &ExperimentConfig, corpus: &Corpus) -> Result<IndexSnapshot> {
    Ok(match c.retriever.kind {
        RetrieverKind::Bm25 => IndexSnapshot::Bm25(Bm25Index::build(corpus, c.retriever.bm25)?),
        RetrieverKind::Tfidf => IndexSnapshot::Tfidf(TfidfIndex::build(corpus)),
        RetrieverKind::Dense => {
            let embedder = build_embedder(&c.retriever.embedder)?;
            IndexSnapshot::Dense(crate::retrieval::EmbeddingStore::embed_corpus(corpus, embedder.as_ref())?)
        }
        RetrieverKind::Hybrid => {
            return Err(Error::config(
                "retriever.kind",
                "hybrid indexes are built from their parts; snapshot bm25 and dense separately",
            ))
        }
    })
}

fn retriever_from_snapshot(c: &ExperimentConfig, snapshot: IndexSnapshot) -> Result<Arc<dyn Retriever>> {
    Ok(match snapshot {
        IndexSnapshot::Bm25(i) => Arc::new(i),
        IndexSnapshot::Tfidf(i) => Arc::new(i),
        IndexSnapshot::Dense(store) => Arc::new(DenseRetriever::new(store, build_embedder(&c.retriever.embedder)?)?),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let c = resolve(&cli.opts)?;
    match cli.command {
        Command::Index { snapshot } => {
            validate_corpus_only(&c)?;
            echo(&c);
            let path = match (snapshot, &c.out) {
                (Some(p), _) => p,
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    dir.join("index.json")
                }
                (None, None) => return Err(Error::config("snapshot", "set --snapshot or --out")),
            };
            let corpus = corpus_only(&c)?;
            let snap = snapshot_of(&c, &corpus)?;
            snap.save(&path)?;
            eprintln!("wrote {} index over {} documents to {}", snap.kind(), corpus.len(), path.display());
            Ok(())
        }
        Command::Retrieve {
            query,
            query_id,
            snapshot,
        } => {
            let retriever = match snapshot {
                Some(p) => {
                    if !p.exists() {
                        return Err(Error::config("snapshot", format!("{} does not exist", p.display())));
                    }
                    echo(&c);
                    retriever_from_snapshot(&c, IndexSnapshot::load(&p)?)?
                }
                None => {
                    validate_corpus_only(&c)?;
                    echo(&c);
                    build_retriever(&c.retriever, &corpus_only(&c)?)?
                }
            };
            let k = c.cutoffs.iter().copied().max().unwrap_or(10);
            let ranked = retriever.retrieve(&query_id, &query, k)?;
            print_stdout(&serde_json::to_string_pretty(&ranked)?)
        }
        Command::Eval => pipeline(c, vec![Stage::Baseline]),
        Command::Pairs => pipeline(c, vec![Stage::Pairs]),
        Command::Iterate => pipeline(c, vec![Stage::Iterate]),
        Command::Run { stages } => {
            let stages = stages.unwrap_or_else(|| c.stages.clone());
            pipeline(c, stages)
        }
        Command::Rewrite => {
            let mut c = c;
            c.stages = vec![Stage::Rewrite];
            c.validate()?;
            echo(&c);
            init_workers(c.workers)?;
            let dir = out_dir(&c)?;
            let ws = Workspace::load(&c)?;
            let backend = backend_for(&c, &ws)?;
            let batch = sample_batch(backend.as_ref(), &c.prompt()?, &ws.records, c.n, c.backend.concurrency)?;
            if let Some(d) = &dir {
                d.write_json(output::RUN_CONFIG, &c)?;
            }
            emit_jsonl(&batch.concat(), dir.as_ref(), "candidates.jsonl")
        }
        Command::Score { candidates } => {
            let mut c = c;
            c.stages = vec![Stage::Rewrite];
            c.validate()?;
            if let Some(p) = &candidates {
                if !p.exists() {
                    return Err(Error::config("candidates", format!("{} does not exist", p.display())));
                }
            }
            echo(&c);
            init_workers(c.workers)?;
            let dir = out_dir(&c)?;
            let ws = Workspace::load(&c)?;
            let mut groups: BTreeMap<String, Vec<CandidateRewrite>> = match &candidates {
                Some(p) => {
                    let mut g: BTreeMap<String, Vec<CandidateRewrite>> = BTreeMap::new();
                    for (_, cand) in jsonl::read::<CandidateRewrite>(p)? {
                        g.entry(cand.query_id.clone()).or_default().push(cand);
                    }
                    g
                }
                None => {
                    let backend = backend_for(&c, &ws)?;
                    sample_batch(backend.as_ref(), &c.prompt()?, &ws.records, c.n, c.backend.concurrency)?
                        .into_iter()
                        .zip(&ws.records)
                        .map(|(cands, r)| (r.query_id.clone(), cands))
                        .collect()
                }
            };
            for (query_id, cands) in groups.iter_mut() {
                let record = ws
                    .records
                    .iter()
                    .find(|r| &r.query_id == query_id)
                    .ok_or_else(|| Error::invalid(format!("candidate for unknown query {query_id}")))?;
                for cand in cands.iter_mut() {
                    cand.score = None;
                }
                score_all(cands, ws.retriever.as_ref(), &ws.corpus.ground_truth_ids(record)?);
            }
            if let Some(d) = &dir {
                d.write_json(output::RUN_CONFIG, &c)?;
            }
            let rows: Vec<CandidateRewrite> = groups.into_values().flatten().collect();
            emit_jsonl(&rows, dir.as_ref(), "scored.jsonl")
        }
        Command::TrainToy { pairs } => {
            if !pairs.exists() {
                return Err(Error::config("pairs", format!("{} does not exist", pairs.display())));
            }
            let has_data = c.corpus.is_some() || c.synthetic.is_some();
            if has_data {
                c.validate()?;
            }
            echo(&c);
            let dir = require_out(&c)?;
            let pairs = load_pairs(&pairs)?;
            let start = match &c.backend.policy {
                Some(p) => TabularPolicy::load(p)?,
                None if has_data => {
                    let ws = Workspace::load(&c)?;
                    toy_sft_policy(&ws.records, c.n, &c.toy)?
                }
                None => TabularPolicy::new(),
            };
            let out = train_on_pairs(&start, &pairs, c.beta, c.toy.dpo_steps, c.toy.dpo_lr)?;
            out.policy.save(&dir.join("policy.json"))?;
            dir.write_text("training_log.csv", &out.log_csv())?;
            let report = HarnessReport::Training(TrainingSummary {
                pairs: pairs.len(),
                steps: out.losses.len(),
                initial_loss: out.losses.first().copied(),
                final_loss: out.losses.last().copied(),
            });
            report.write(&dir, &c)?;
            print_stdout(&report.to_markdown())
        }
        Command::Synth {
            tools,
            num_queries,
            max_tools_per_query,
            vocab_size,
            categories,
        } => {
            let spec = SyntheticSpec {
                tools,
                queries: num_queries,
                max_tools_per_query,
                vocab_size,
                categories,
                seed: cli.opts.seed.unwrap_or(SyntheticSpec::default().seed),
            };
            spec.validate()?;
            let dir = require_out(&c)?;
            eprintln!("resolved config: {}", serde_json::to_string(&spec)?);
            let (corpus, records) = write_synthetic(&spec, dir.path())?;
            dir.write_json("synthetic_spec.json", &spec)?;
            eprintln!("wrote {} tools and {} queries to {}", corpus.len(), records.len(), dir.path().display());
            Ok(())
        }
        Command::Report { from } => {
            let path = if from.is_dir() { from.join(output::REPORT_JSON) } else { from };
            if !path.exists() {
                return Err(Error::config("from", format!("{} does not exist", path.display())));
            }
            let report = HarnessReport::load(&path)?;
            if !report.audit() {
                return Err(Error::invalid("report numbers do not match their per-query rows"));
            }
            let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let dir = RunDir::acquire(parent)?;
            let md = report.to_markdown();
            dir.write_text(output::REPORT_MD, &md)?;
            print_stdout(&md)
        }
        Command::Convert {
            tools_input,
            queries_input,
            subset,
            vague_field,
        } => {
            if !tools_input.exists() {
                return Err(Error::config("tools_input", format!("{} does not exist", tools_input.display())));
            }
            let subset = match subset.as_deref() {
                None => SubsetTag::Other,
                Some(s) => serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
                    .map_err(|_| Error::config("subset", format!("unknown subset {s:?}")))?,
            };
            let dir = require_out(&c)?;
            let corpus = Corpus::from_docs(corpus::toolbench::convert_tools(&tools_input)?)?;
            corpus.save(&dir.join("tools.jsonl"))?;
            eprintln!("wrote {} tools", corpus.len());
            if let Some(q) = queries_input {
                let (records, skipped) = corpus::toolbench::convert_queries(&q, subset, vague_field.as_deref())?;
                let mut kept = Vec::with_capacity(records.len());
                let mut unresolved = 0;
                for r in records {
                    match validate_query(r, &corpus) {
                        Ok(r) => kept.push(r),
                        Err(e) => {
                            unresolved += 1;
                            log::warn!("{e}");
                        }
                    }
                }
                save_queries(&dir.join("queries.jsonl"), &kept)?;
                eprintln!(
                    "wrote {} queries ({skipped} skipped as incomplete, {unresolved} with unresolved tools)",
                    kept.len()
                );
            }
            Ok(())
        }
    }
}
