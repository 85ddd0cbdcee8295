use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{avg_delta, relative_delta};
use crate::corpus::SubsetTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub subset: SubsetTag,
    /// NDCG at each configured cutoff.
    pub ndcg: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    /// `I1`, `I2`, `I3`, `other`, or `all`.
    pub subset: String,
    pub count: usize,
    pub ndcg: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub retriever: String,
    pub cutoffs: Vec<usize>,
    pub per_query: Vec<QueryEval>,
    pub summary: Vec<SubsetSummary>,
}

fn summarize(name: &str, rows: &[&QueryEval], n_cut: usize) -> SubsetSummary {
    // fixed summation order: ascending query_id
    let mut sorted: Vec<&&QueryEval> = rows.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let count = sorted.len();
    let mut ndcg = vec![0.0; n_cut];
    let mut avg = 0.0;
    for q in &sorted {
        for (acc, v) in ndcg.iter_mut().zip(&q.ndcg) {
            *acc += v;
        }
        avg += q.avg;
    }
    if count > 0 {
        ndcg.iter_mut().for_each(|v| *v /= count as f64);
        avg /= count as f64;
    }
    SubsetSummary {
        subset: name.to_string(),
        count,
        ndcg,
        avg,
    }
}

impl EvalReport {
    pub fn new(label: impl Into<String>, retriever: impl Into<String>, cutoffs: Vec<usize>, per_query: Vec<QueryEval>) -> Self {
        let summary = Self::summaries(&cutoffs, &per_query);
        Self {
            label: label.into(),
            retriever: retriever.into(),
            cutoffs,
            per_query,
            summary,
        }
    }

    fn summaries(cutoffs: &[usize], per_query: &[QueryEval]) -> Vec<SubsetSummary> {
        let mut by_subset: BTreeMap<SubsetTag, Vec<&QueryEval>> = BTreeMap::new();
        for q in per_query {
            by_subset.entry(q.subset).or_default().push(q);
        }
        let mut out: Vec<SubsetSummary> = by_subset
            .iter()
            .map(|(tag, rows)| summarize(tag.as_str(), rows, cutoffs.len()))
            .collect();
        let all: Vec<&QueryEval> = per_query.iter().collect();
        out.push(summarize("all", &all, cutoffs.len()));
        out
    }

    /// Recomputes the aggregates from the per-query rows.
    pub fn audit(&self) -> bool {
        Self::summaries(&self.cutoffs, &self.per_query) == self.summary
    }

    pub fn subset(&self, name: &str) -> Option<&SubsetSummary> {
        self.summary.iter().find(|s| s.subset == name)
    }

    pub fn overall(&self) -> &SubsetSummary {
        self.subset("all").expect("summary always has an `all` row")
    }
}

/// Relative change of one subset between two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub subset: String,
    /// `None` where the old value is 0 and no relative change exists.
    pub per_k: Vec<Option<f64>>,
    pub avg: Option<f64>,
}

/// Per-subset %Δ of `new` against `old`; the Avg. column is the mean of per-k deltas.
pub fn compare(new: &EvalReport, old: &EvalReport) -> Result<Vec<DeltaRow>> {
    if new.cutoffs != old.cutoffs {
        return Err(Error::invalid("reports use different cutoffs"));
    }
    Ok(old
        .summary
        .iter()
        .filter_map(|o| new.subset(&o.subset).map(|n| (n, o)))
        .map(|(n, o)| {
            let per_k = n
                .ndcg
                .iter()
                .zip(&o.ndcg)
                .map(|(&nv, &ov)| relative_delta(nv, ov).ok())
                .collect();
            let pairs: Vec<(f64, f64)> = n.ndcg.iter().copied().zip(o.ndcg.iter().copied()).collect();
            DeltaRow {
                subset: o.subset.clone(),
                per_k,
                avg: avg_delta(&pairs).ok(),
            }
        })
        .collect())
}

pub enum TableRow<'a> {
    Scores { label: String, report: &'a EvalReport },
    Delta { label: String, deltas: &'a [DeltaRow] },
}

const SUBSET_ORDER: [&str; 5] = ["I1", "I2", "I3", "other", "all"];

/// Markdown table: one column group per subset with NDCG@k columns and Avg.
/// Scores are printed ×100, deltas as signed percentages.
pub fn render_markdown(title: &str, rows: &[TableRow<'_>]) -> String {
    let mut cutoffs: Vec<usize> = Vec::new();
    let mut present: Vec<&str> = Vec::new();
    for row in rows {
        if let TableRow::Scores { report, .. } = row {
            if cutoffs.is_empty() {
                cutoffs = report.cutoffs.clone();
            }
            for s in &report.summary {
                if !present.contains(&s.subset.as_str()) {
                    present.push(&s.subset);
                }
            }
        }
    }
    let subsets: Vec<&str> = SUBSET_ORDER.iter().copied().filter(|s| present.contains(s)).collect();
    // a lone `other` subset duplicates `all`
    let subsets: Vec<&str> = if subsets == ["other", "all"] { vec!["all"] } else { subsets };

    let mut out = String::new();
    let _ = writeln!(out, "### {title}\n");
    let mut header = String::from("| Method |");
    let mut rule = String::from("|---|");
    for s in &subsets {
        for k in &cutoffs {
            let _ = write!(header, " {s} NDCG@{k} |");
            rule.push_str("---:|");
        }
        let _ = write!(header, " {s} Avg. |");
        rule.push_str("---:|");
    }
    let _ = writeln!(out, "{header}\n{rule}");
    let fmt_delta = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |d| format!("{d:+.2}"));
    for row in rows {
        let mut line = String::new();
        match row {
            TableRow::Scores { label, report } => {
                let _ = write!(line, "| {label} |");
                for s in &subsets {
                    match report.subset(s) {
                        Some(sum) => {
                            for v in &sum.ndcg {
                                let _ = write!(line, " {:.2} |", v * 100.0);
                            }
                            let _ = write!(line, " {:.2} |", sum.avg * 100.0);
                        }
                        None => line.push_str(&" - |".repeat(cutoffs.len() + 1)),
                    }
                }
            }
            TableRow::Delta { label, deltas } => {
                let _ = write!(line, "| {label} |");
                for s in &subsets {
                    match deltas.iter().find(|d| d.subset == *s) {
                        Some(d) => {
                            for v in &d.per_k {
                                let _ = write!(line, " {} |", fmt_delta(*v));
                            }
                            let _ = write!(line, " {} |", fmt_delta(d.avg));
                        }
                        None => line.push_str(&" - |".repeat(cutoffs.len() + 1)),
                    }
                }
            }
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, subset: SubsetTag, n5: f64, n10: f64) -> QueryEval {
        QueryEval {
            query_id: id.into(),
            subset,
            ndcg: vec![n5, n10],
            avg: (n5 + n10) / 2.0,
        }
    }

    #[test]
    fn summaries_and_audit() {
        let r = EvalReport::new(
            "x",
            "bm25",
            vec![5, 10],
            vec![
                q("b", SubsetTag::I1, 0.2, 0.4),
                q("a", SubsetTag::I1, 0.6, 0.8),
                q("c", SubsetTag::I2, 1.0, 1.0),
            ],
        );
        let i1 = r.subset("I1").unwrap();
        assert_eq!(i1.count, 2);
        assert!((i1.ndcg[0] - 0.4).abs() < 1e-12);
        assert!((i1.avg - 0.5).abs() < 1e-12);
        assert_eq!(r.overall().count, 3);
        assert!(r.audit());
        let mut tampered = r.clone();
        tampered.per_query[0].avg = 0.0;
        assert!(!tampered.audit());
    }

    #[test]
    fn compare_uses_mean_of_per_k_deltas() {
        let old = EvalReport::new("old", "bm25", vec![5, 10], vec![q("a", SubsetTag::I2, 0.0881, 0.0973)]);
        let new = EvalReport::new("new", "bm25", vec![5, 10], vec![q("a", SubsetTag::I2, 0.1906, 0.2011)]);
        let d = compare(&new, &old).unwrap();
        let i2 = d.iter().find(|r| r.subset == "I2").unwrap();
        assert_eq!(format!("{:.2}", i2.per_k[0].unwrap()), "116.35");
        assert_eq!(format!("{:.2}", i2.per_k[1].unwrap()), "106.68");
        assert_eq!(format!("{:.2}", i2.avg.unwrap()), "111.51");
    }

    #[test]
    fn zero_baseline_has_no_delta() {
        let old = EvalReport::new("old", "bm25", vec![5, 10], vec![q("a", SubsetTag::Other, 0.0, 0.0)]);
        let new = EvalReport::new("new", "bm25", vec![5, 10], vec![q("a", SubsetTag::Other, 0.5, 0.5)]);
        let d = compare(&new, &old).unwrap();
        assert!(d.iter().all(|r| r.avg.is_none()));
        let md = render_markdown(
            "t",
            &[
                TableRow::Scores { label: "old".into(), report: &old },
                TableRow::Delta { label: "%Δ".into(), deltas: &d },
            ],
        );
        assert!(md.contains("n/a"));
    }

    #[test]
    fn markdown_layout() {
        let r = EvalReport::new("x", "bm25", vec![5, 10], vec![q("a", SubsetTag::I1, 0.5, 0.25)]);
        let md = render_markdown("BM25", &[TableRow::Scores { label: "BM25".into(), report: &r }]);
        assert!(md.contains("| Method | I1 NDCG@5 | I1 NDCG@10 | I1 Avg. | all NDCG@5 |"));
        assert!(md.contains("| BM25 | 50.00 | 25.00 | 37.50 |"));
    }
}
