use super::{Generation, RewriteBackend, RewritePrompt};
use crate::corpus::QueryRecord;
use crate::error::Result;

/// Deterministic stand-in for a trained rewriter.
///
/// Candidate `j` is the vague text followed by the first `min(j, |U_g|)`
/// ground-truth tool names, so lexical overlap with the relevant tools grows
/// with `j` and `j = 0` is the vague text itself.
pub fn mock_rewrite(record: &QueryRecord, j: usize) -> String {
    let take = j.min(record.ground_truth.len());
    if take == 0 {
        return record.vague.clone();
    }
    let names: Vec<&str> = record.ground_truth[..take]
        .iter()
        .map(|r| r.tool_name.as_str())
        .collect();
    format!("{} {}", record.vague, names.join(" "))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend {
    start: usize,
}

impl MockBackend {
    /// Candidate `k` is `mock_rewrite(record, start + k)`.
    pub fn new(start: usize) -> Self {
        Self { start }
    }

    /// Every candidate carries all ground-truth tool names.
    pub fn saturated() -> Self {
        Self { start: usize::MAX / 2 }
    }
}

impl RewriteBackend for MockBackend {
    fn tag(&self) -> String {
        if self.start == 0 {
            "mock".into()
        } else if self.start >= usize::MAX / 2 {
            "mock-saturated".into()
        } else {
            format!("mock@{}", self.start)
        }
    }

    fn generate(&self, _: &RewritePrompt, record: &QueryRecord, n: usize) -> Result<Vec<Generation>> {
        Ok((0..n)
            .map(|k| Generation::new(mock_rewrite(record, self.start.saturating_add(k))))
            .collect())
    }
}

/// Returns the vague text unchanged; the no-rewrite control.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl RewriteBackend for IdentityBackend {
    fn tag(&self) -> String {
        "identity".into()
    }

    fn generate(&self, _: &RewritePrompt, record: &QueryRecord, n: usize) -> Result<Vec<Generation>> {
        Ok(vec![Generation::new(record.vague.clone()); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewriter::{sample_candidates, tests::record};

    #[test]
    fn rule_application() {
        let r = record();
        assert_eq!(mock_rewrite(&r, 0), r.vague);
        assert_eq!(mock_rewrite(&r, 2), format!("{} CurrencyExchange Deezer", r.vague));
        assert_eq!(mock_rewrite(&r, 1), format!("{} CurrencyExchange", r.vague));
        assert_eq!(mock_rewrite(&r, 99), mock_rewrite(&r, 2));
    }

    #[test]
    fn four_deterministic_candidates() {
        let r = record();
        let p = RewritePrompt::enhancement();
        let a = sample_candidates(&MockBackend::new(0), &p, &r, 4).unwrap();
        let b = sample_candidates(&MockBackend::new(0), &p, &r, 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(a[0].text, r.vague);
        for (j, c) in a.iter().enumerate() {
            assert_eq!(c.candidate_index, j);
            assert_eq!(c.text, mock_rewrite(&r, j));
        }
        let sat = sample_candidates(&MockBackend::saturated(), &p, &r, 2).unwrap();
        assert!(sat.iter().all(|c| c.text == mock_rewrite(&r, 2)));
    }
}
