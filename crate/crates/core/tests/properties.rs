//! Property suites for the cross-module invariants.

use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;

use toolbridge::corpus::{load_corpus, Corpus, QueryRecord, SubsetTag, ToolDoc, ToolRef};
use toolbridge::dpo::{completion_id, dpo_loss, DpoBatch, DpoRow, PromptTable, TabularPolicy};
use toolbridge::harness::{gen_synthetic, run_trb, SyntheticSpec, Workspace};
use toolbridge::metrics::{ndcg_at_k, relative_delta};
use toolbridge::preference::{collect_pairs, select_pair, PairOutcome};
use toolbridge::retrieval::{build_retriever, RankedList, RetrieverConfig, RetrieverKind, ScoredDoc};
use toolbridge::rewriter::{
    sample_candidates, CandidateFlag, CandidateRewrite, Generation, MockBackend, RewriteBackend, RewritePrompt,
};

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta"];

fn docs_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..WORDS.len(), 1..8), 1..15)
}

fn corpus_from(docs: &[Vec<usize>]) -> Corpus {
    Corpus::from_docs(
        docs.iter()
            .enumerate()
            .map(|(i, ws)| ToolDoc {
                doc_id: format!("d{i:02}"),
                tool_name: format!("Tool{i}"),
                api_name: format!("api{i}"),
                description: ws.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" "),
                category: (i % 2 == 0).then(|| "Even".to_string()),
            })
            .collect(),
    )
    .unwrap()
}

fn ranked(ids: &[usize]) -> RankedList {
    RankedList {
        query_id: "q".into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, d)| ScoredDoc {
                doc_id: format!("d{d}"),
                score: -(i as f64),
            })
            .collect(),
    }
}

/// Returns `count` generations, the ones listed in `empty` blank, or fails.
struct Scripted {
    count: usize,
    empty: Vec<usize>,
    fail: bool,
}

impl RewriteBackend for Scripted {
    fn tag(&self) -> String {
        "scripted".into()
    }

    fn generate(&self, _: &RewritePrompt, record: &QueryRecord, _: usize) -> toolbridge::Result<Vec<Generation>> {
        if self.fail {
            return Err(toolbridge::Error::Backend("scripted failure".into()));
        }
        Ok((0..self.count)
            .map(|i| Generation::new(if self.empty.contains(&i) { String::new() } else { format!("{} v{i}", record.vague) }))
            .collect())
    }
}

fn record(vague: &str) -> QueryRecord {
    QueryRecord {
        query_id: "q".into(),
        vague: vague.into(),
        specific: None,
        ground_truth: vec![ToolRef::new("Tool0", "api0")],
        subset: SubsetTag::I1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_round_trips_and_loads_deterministically(docs in docs_strategy()) {
        let corpus = corpus_from(&docs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tools.jsonl");
        corpus.save(&path).unwrap();
        let a = load_corpus(&path).unwrap();
        let b = load_corpus(&path).unwrap();
        prop_assert_eq!(a.docs(), corpus.docs());
        prop_assert_eq!(a.docs(), b.docs());
    }

    #[test]
    fn retrieve_k_is_a_prefix_of_retrieve_k_plus_1(
        docs in docs_strategy(),
        query in prop::collection::vec(0usize..WORDS.len(), 1..4),
        kind in prop::sample::select(vec![RetrieverKind::Bm25, RetrieverKind::Tfidf, RetrieverKind::Dense, RetrieverKind::Hybrid]),
        k in 1usize..16,
    ) {
        let corpus = corpus_from(&docs);
        let r = build_retriever(&RetrieverConfig::with_kind(kind), &corpus).unwrap();
        let q = query.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ");
        let short = r.retrieve("q", &q, k).unwrap();
        let long = r.retrieve("q", &q, k + 1).unwrap();
        prop_assert!(long.entries.starts_with(&short.entries));
        let again = r.retrieve("q", &q, k).unwrap();
        let bits = |l: &RankedList| l.entries.iter().map(|e| e.score.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&short), bits(&again));
    }

    #[test]
    fn ndcg_bounds_and_perfect_prefix(
        order in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
        len in 1usize..=8,
        relevant in prop::collection::btree_set(0usize..8, 1..6),
        k in 1usize..10,
    ) {
        let list = ranked(&order[..len]);
        let gt: HashSet<String> = relevant.iter().map(|d| format!("d{d}")).collect();
        let v = ndcg_at_k(&list, &gt, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let need = k.min(gt.len());
        let perfect = list.entries.len() >= need && list.entries[..need].iter().all(|e| gt.contains(&e.doc_id));
        prop_assert_eq!(perfect, (v - 1.0).abs() < 1e-12, "ndcg {}", v);
    }

    #[test]
    fn placing_a_relevant_doc_never_lowers_ndcg(
        order in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
        relevant in prop::collection::btree_set(0usize..8, 1..6),
        rank in 0usize..8,
        k in 1usize..10,
    ) {
        prop_assume!(rank < k);
        let gt: HashSet<String> = relevant.iter().map(|d| format!("d{d}")).collect();
        prop_assume!(!relevant.contains(&order[rank]));
        // swap a relevant doc from further down (or outside) into `rank`
        let Some(pos) = order.iter().position(|d| relevant.contains(d) && order.iter().position(|x| x == d).unwrap() > rank) else {
            return Ok(());
        };
        let mut better = order.clone();
        better.swap(rank, pos);
        let before = ndcg_at_k(&ranked(&order), &gt, k).unwrap();
        let after = ndcg_at_k(&ranked(&better), &gt, k).unwrap();
        prop_assert!(after >= before - 1e-12, "{} < {}", after, before);
    }

    #[test]
    fn relative_delta_of_equal_values_is_zero(x in 1e-9f64..1e9) {
        prop_assert_eq!(relative_delta(x, x).unwrap(), 0.0);
    }

    #[test]
    fn exactly_n_candidates_always(
        count in 0usize..8,
        empty in prop::collection::vec(0usize..8, 0..4),
        fail in any::<bool>(),
        n in 1usize..6,
    ) {
        let backend = Scripted { count, empty: empty.clone(), fail };
        let cands = sample_candidates(&backend, &RewritePrompt::enhancement(), &record("find a tool"), n).unwrap();
        prop_assert_eq!(cands.len(), n);
        for (j, c) in cands.iter().enumerate() {
            prop_assert_eq!(c.candidate_index, j);
            let should_fail = fail || j >= count || empty.contains(&j);
            prop_assert_eq!(c.is_failed(), should_fail);
            if fail {
                prop_assert_eq!(&c.flags, &vec![CandidateFlag::BackendFailure]);
            }
            if c.is_failed() {
                prop_assert_eq!(&c.text, "find a tool");
            }
        }
    }

    #[test]
    fn rendered_prompt_holds_the_instruction_once(words in prop::collection::vec("[a-z]{3,8}", 1..6)) {
        let vague = format!("zqx {}", words.join(" "));
        let text = RewritePrompt::enhancement().render(&vague, &[]);
        prop_assert_eq!(text.matches(&vague).count(), 1);
    }

    #[test]
    fn selected_pairs_are_strict_and_deterministic(
        scores in prop::collection::vec(prop::option::of(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0])), 0..6),
        failed in prop::collection::vec(any::<bool>(), 6),
    ) {
        let cands: Vec<CandidateRewrite> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| CandidateRewrite {
                query_id: "q".into(),
                candidate_index: i,
                text: format!("t{i}"),
                score: *s,
                flags: if failed[i] { vec![CandidateFlag::BackendFailure] } else { Vec::new() },
            })
            .collect();
        let outcome = select_pair(&cands);
        prop_assert_eq!(&outcome, &select_pair(&cands));
        let valid: Vec<f64> = cands.iter().filter(|c| !c.is_failed()).filter_map(|c| c.score).collect();
        match outcome {
            PairOutcome::Pair { chosen, rejected } => {
                let (c, r) = (cands[chosen].score.unwrap(), cands[rejected].score.unwrap());
                prop_assert!(c > r);
                prop_assert!(!cands[chosen].is_failed() && !cands[rejected].is_failed());
                prop_assert!(valid.iter().all(|&s| s <= c && s >= r));
            }
            PairOutcome::Equal => prop_assert!(valid.len() >= 2 && valid.iter().all(|&s| s == valid[0])),
            PairOutcome::Insufficient => prop_assert!(valid.len() < 2),
        }
    }

    #[test]
    fn single_dpo_step_from_reference_widens_every_margin(
        logits in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
        picks in prop::collection::vec((0usize..4, 1usize..4), 6),
        beta in prop::sample::select(vec![0.05, 0.1, 0.5]),
    ) {
        let policy = TabularPolicy {
            prompts: logits
                .iter()
                .enumerate()
                .map(|(p, l)| (format!("p{p}"), PromptTable { completions: (0..4).map(completion_id).collect(), logits: l.clone() }))
                .collect(),
        };
        // one row per prompt, so no two rows pull the same logits apart
        let rows: Vec<DpoRow> = (0..logits.len())
            .map(|p| DpoRow { prompt_id: format!("p{p}"), chosen: picks[p].0, rejected: (picks[p].0 + picks[p].1) % 4 })
            .collect();
        let batch = DpoBatch::new(rows.clone(), beta).unwrap();
        let (loss, grad) = dpo_loss(&policy, &policy, &batch).unwrap();
        prop_assert_eq!(loss, std::f64::consts::LN_2);
        let mut stepped = policy.clone();
        stepped.apply_gradient(&grad, 0.5);
        for r in &rows {
            prop_assert!(grad[&r.prompt_id][r.chosen] < 0.0 && grad[&r.prompt_id][r.rejected] > 0.0);
            let margin = |p: &TabularPolicy| {
                let lp = p.prompts[&r.prompt_id].log_probs();
                lp[r.chosen] - lp[r.rejected]
            };
            prop_assert!(margin(&stepped) > margin(&policy));
        }
        // doubling β doubles the gradient at the reference point
        let (_, double) = dpo_loss(&policy, &policy, &DpoBatch::new(rows, beta * 2.0).unwrap()).unwrap();
        for (id, g) in &grad {
            for (a, b) in g.iter().zip(&double[id]) {
                prop_assert!((b - 2.0 * a).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pair_accounting_and_fallback_accounting_hold(seed in 0u64..1000, start in 0usize..4, n in 1usize..5) {
        let spec = SyntheticSpec { tools: 40, queries: 20, categories: 4, seed, ..SyntheticSpec::default() };
        let (corpus, records) = gen_synthetic(&spec).unwrap();
        let ws = Workspace::new(corpus, records, &RetrieverConfig::default(), vec![5, 10]).unwrap();
        let backend = MockBackend::new(start);
        let prompt = RewritePrompt::enhancement();
        let ds = collect_pairs(&ws.records, &ws.corpus, &backend, &prompt, ws.retriever.as_ref(), n).unwrap();
        let s = &ds.summary;
        prop_assert_eq!(s.records, s.pairs + s.dropped_equal + s.dropped_insufficient);
        for p in &ds.pairs {
            prop_assert!(p.score_chosen > p.score_rejected);
        }
        let trb = run_trb(&ws, &backend, &prompt, n, n > 1).unwrap();
        prop_assert!(trb.balanced());
        prop_assert!(trb.baseline.audit() && trb.rewritten.audit());
    }
}

#[test]
fn shared_retriever_scores_are_reproducible_across_threads() {
    let corpus = corpus_from(&[vec![0, 1, 2], vec![2, 3], vec![4, 5, 6, 7], vec![1, 1, 3]]);
    let r: Arc<dyn toolbridge::retrieval::Retriever> = build_retriever(&RetrieverConfig::default(), &corpus).unwrap();
    let base = r.score_all("beta delta").unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let r = r.clone();
            std::thread::spawn(move || r.score_all("beta delta").unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), base);
    }
}
