//! Supervised and preference objectives on a tabular policy.
//!
//! A [`TabularPolicy`] holds one logit vector per prompt over a finite set
//! of completions, so a "generation" is a single categorical draw and a
//! sequence log-likelihood collapses to one log-softmax entry. Both losses
//! come with analytic gradients; the test suite checks them against central
//! finite differences.
//!
//! The preference loss is the standard DPO objective
//!
//! ```text
//! L = −mean log σ(β · [(log πθ(y⁺|x) − log πref(y⁺|x)) − (log πθ(y⁻|x) − log πref(y⁻|x))])
//! ```
//!
//! The softmax normalizer cancels inside the bracket, so each row only moves
//! the logits of its chosen and rejected completions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::QueryRecord;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::preference::PreferencePair;
use crate::rewriter::{mock_rewrite, Generation, RewriteBackend, RewritePrompt};

pub const DEFAULT_BETA: f64 = 0.1;

/// Completion texts and logits for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTable {
    pub completions: Vec<String>,
    pub logits: Vec<f64>,
}

impl PromptTable {
    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.completions.iter().position(|c| c == text)
    }
}

/// Display form of a completion index, e.g. `c0003`. Zero padding keeps the
/// lexicographic and numeric orders equal.
pub fn completion_id(index: usize) -> String {
    format!("c{index:04}")
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Running mean; a constant sequence averages to exactly that constant.
fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub prompts: BTreeMap<String, PromptTable>,
}

/// Gradient with the same shape as a policy's logits.
pub type PolicyGradient = BTreeMap<String, Vec<f64>>;

impl TabularPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let policy: Self = jsonl::read_json(path)?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, t) in &self.prompts {
            if t.completions.is_empty() || t.completions.len() != t.logits.len() {
                return Err(Error::invalid(format!("prompt {id}: completions and logits disagree")));
            }
            if t.logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::invalid(format!("prompt {id}: non-finite logit")));
            }
        }
        Ok(())
    }

    pub fn table(&self, prompt_id: &str) -> Result<&PromptTable> {
        self.prompts
            .get(prompt_id)
            .ok_or_else(|| Error::invalid(format!("unknown prompt id {prompt_id}")))
    }

    /// Returns the index of `text` under `prompt_id`, adding it with logit 0
    /// if it is new.
    pub fn intern(&mut self, prompt_id: &str, text: &str) -> usize {
        let t = self.prompts.entry(prompt_id.to_string()).or_insert_with(|| PromptTable {
            completions: Vec::new(),
            logits: Vec::new(),
        });
        match t.position(text) {
            Some(i) => i,
            None => {
                t.completions.push(text.to_string());
                t.logits.push(0.0);
                t.completions.len() - 1
            }
        }
    }

    fn log_prob(&self, prompt_id: &str, index: usize) -> Result<(f64, Vec<f64>)> {
        let t = self.table(prompt_id)?;
        if index >= t.logits.len() {
            return Err(Error::invalid(format!(
                "prompt {prompt_id}: unknown completion {}",
                completion_id(index)
            )));
        }
        let lp = t.log_probs();
        Ok((lp[index], lp))
    }

    fn zero_gradient(&self) -> PolicyGradient {
        self.prompts
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.logits.len()]))
            .collect()
    }

    fn same_universe(&self, other: &Self) -> bool {
        self.prompts.len() == other.prompts.len()
            && self
                .prompts
                .iter()
                .zip(&other.prompts)
                .all(|((a, ta), (b, tb))| a == b && ta.completions == tb.completions)
    }

    /// `θ ← θ − lr · g`.
    pub fn apply_gradient(&mut self, grad: &PolicyGradient, lr: f64) {
        for (id, g) in grad {
            if let Some(t) = self.prompts.get_mut(id) {
                for (l, d) in t.logits.iter_mut().zip(g) {
                    *l -= lr * d;
                }
            }
        }
    }
}

/// One supervised row: the target completion for a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftRow {
    pub prompt_id: String,
    pub target: usize,
}

/// `−mean log πθ(target | prompt)` and its gradient.
pub fn sft_loss(policy: &TabularPolicy, rows: &[SftRow]) -> Result<(f64, PolicyGradient)> {
    if rows.is_empty() {
        return Err(Error::invalid("sft_loss needs at least one row"));
    }
    let scale = 1.0 / rows.len() as f64;
    let mut grad = policy.zero_gradient();
    let mut nll = Vec::with_capacity(rows.len());
    for r in rows {
        let (lp, all) = policy.log_prob(&r.prompt_id, r.target)?;
        nll.push(-lp);
        let g = grad.get_mut(&r.prompt_id).expect("prompt exists");
        for (i, (gi, lpi)) in g.iter_mut().zip(&all).enumerate() {
            let indicator = if i == r.target { 1.0 } else { 0.0 };
            *gi += scale * (lpi.exp() - indicator);
        }
    }
    Ok((running_mean(nll), grad))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpoRow {
    pub prompt_id: String,
    pub chosen: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch {
    rows: Vec<DpoRow>,
    beta: f64,
}

impl DpoBatch {
    pub fn new(rows: Vec<DpoRow>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        if rows.is_empty() {
            return Err(Error::NoPairs);
        }
        if let Some(r) = rows.iter().find(|r| r.chosen == r.rejected) {
            return Err(Error::invalid(format!("prompt {}: chosen equals rejected", r.prompt_id)));
        }
        Ok(Self { rows, beta })
    }

    pub fn rows(&self) -> &[DpoRow] {
        &self.rows
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Implicit-reward margin `β · [Δθ(y⁺) − Δθ(y⁻)]` of one row.
fn row_margin(policy: &TabularPolicy, reference: &TabularPolicy, row: &DpoRow, beta: f64) -> Result<f64> {
    let (pc, _) = policy.log_prob(&row.prompt_id, row.chosen)?;
    let (pr, _) = policy.log_prob(&row.prompt_id, row.rejected)?;
    let (rc, _) = reference.log_prob(&row.prompt_id, row.chosen)?;
    let (rr, _) = reference.log_prob(&row.prompt_id, row.rejected)?;
    Ok(beta * ((pc - rc) - (pr - rr)))
}

/// DPO loss of `policy` against a frozen `reference`, with the gradient
/// with respect to the policy logits only.
pub fn dpo_loss(policy: &TabularPolicy, reference: &TabularPolicy, batch: &DpoBatch) -> Result<(f64, PolicyGradient)> {
    if !policy.same_universe(reference) {
        return Err(Error::invalid("policy and reference have different completion universes"));
    }
    let scale = 1.0 / batch.rows.len() as f64;
    let mut grad = policy.zero_gradient();
    let mut losses = Vec::with_capacity(batch.rows.len());
    for row in &batch.rows {
        let z = row_margin(policy, reference, row, batch.beta)?;
        losses.push(softplus(-z));
        // d/dz softplus(−z) = −σ(−z); dz/dlogit is +β at y⁺ and −β at y⁻
        let w = batch.beta * sigmoid(-z) * scale;
        let g = grad.get_mut(&row.prompt_id).expect("prompt exists");
        g[row.chosen] -= w;
        g[row.rejected] += w;
    }
    Ok((running_mean(losses), grad))
}

/// Maps preference pairs onto completion indices, interning unseen texts
/// into both policies so they keep a shared universe.
pub fn intern_pairs(policy: &mut TabularPolicy, reference: &mut TabularPolicy, pairs: &[PreferencePair]) -> Vec<DpoRow> {
    pairs
        .iter()
        .map(|p| {
            let chosen = policy.intern(&p.query_id, &p.chosen);
            let rejected = policy.intern(&p.query_id, &p.rejected);
            reference.intern(&p.query_id, &p.chosen);
            reference.intern(&p.query_id, &p.rejected);
            DpoRow {
                prompt_id: p.query_id.clone(),
                chosen,
                rejected,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// `training_log.csv` body: `step,loss`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

/// Plain gradient descent on the DPO loss.
pub fn train_toy(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &DpoBatch,
    steps: usize,
    learning_rate: f64,
) -> Result<TrainOutcome> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
    }
    let mut current = policy.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = dpo_loss(&current, reference, batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        current.apply_gradient(&grad, learning_rate);
        if current.validate().is_err() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(TrainOutcome { policy: current, losses })
}

/// Plain gradient descent on the supervised loss.
pub fn train_sft(policy: &TabularPolicy, rows: &[SftRow], steps: usize, learning_rate: f64) -> Result<TrainOutcome> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
    }
    let mut current = policy.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = sft_loss(&current, rows)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        current.apply_gradient(&grad, learning_rate);
    }
    Ok(TrainOutcome { policy: current, losses })
}

/// Builds the toy completion universe: for each record the distinct mock
/// rewrites `j = 0..n` followed by the specific text when present.
pub fn toy_universe(records: &[QueryRecord], n: usize) -> TabularPolicy {
    let mut policy = TabularPolicy::new();
    for r in records {
        for j in 0..n.max(1) {
            policy.intern(&r.query_id, &mock_rewrite(r, j));
        }
        if let Some(s) = &r.specific {
            policy.intern(&r.query_id, s);
        }
    }
    policy
}

/// Supervised rows targeting each record's specific text.
pub fn sft_rows(policy: &TabularPolicy, records: &[QueryRecord]) -> Vec<SftRow> {
    records
        .iter()
        .filter_map(|r| {
            let target = policy.prompts.get(&r.query_id)?.position(r.specific.as_deref()?)?;
            Some(SftRow {
                prompt_id: r.query_id.clone(),
                target,
            })
        })
        .collect()
}

/// How a [`ToyBackend`] turns its policy into candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyDecoding {
    /// Independent categorical draws from the softmax, one seeded stream per
    /// (seed, prompt, candidate index).
    Sample,
    /// The `n` most probable completions, ties broken by ascending index,
    /// padded with the top completion when the table is shorter than `n`.
    Greedy,
}

/// Serves a tabular policy as a rewriter.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    policy: Arc<TabularPolicy>,
    seed: u64,
    label: String,
    decoding: ToyDecoding,
}

impl ToyBackend {
    pub fn new(policy: Arc<TabularPolicy>, seed: u64) -> Self {
        Self {
            policy,
            seed,
            label: "toy".into(),
            decoding: ToyDecoding::Sample,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn greedy(mut self) -> Self {
        self.decoding = ToyDecoding::Greedy;
        self
    }

    pub fn decoding(&self) -> ToyDecoding {
        self.decoding
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    /// Completion indices ranked by probability.
    pub fn ranked(&self, prompt_id: &str) -> Result<Vec<usize>> {
        let t = self.policy.table(prompt_id)?;
        let mut order: Vec<usize> = (0..t.logits.len()).collect();
        order.sort_by(|&a, &b| t.logits[b].total_cmp(&t.logits[a]).then(a.cmp(&b)));
        Ok(order)
    }

    /// Completion index drawn for candidate `index` of `prompt_id`.
    pub fn draw(&self, prompt_id: &str, index: usize) -> Result<usize> {
        let t = self.policy.table(prompt_id)?;
        let dist = WeightedIndex::new(t.probs()).map_err(|e| Error::invalid(format!("prompt {prompt_id}: {e}")))?;
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((prompt_id.len() as u64).to_le_bytes());
        h.update(prompt_id.as_bytes());
        h.update((index as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        Ok(dist.sample(&mut rng))
    }
}

impl RewriteBackend for ToyBackend {
    fn tag(&self) -> String {
        match self.decoding {
            ToyDecoding::Sample => format!("{}#seed{}", self.label, self.seed),
            ToyDecoding::Greedy => format!("{}#greedy", self.label),
        }
    }

    fn generate(&self, _: &RewritePrompt, record: &QueryRecord, n: usize) -> Result<Vec<Generation>> {
        let t = self.policy.table(&record.query_id)?;
        if self.decoding == ToyDecoding::Sample {
            return (0..n)
                .map(|k| Ok(Generation::new(t.completions[self.draw(&record.query_id, k)?].clone())))
                .collect();
        }
        let ranked = self.ranked(&record.query_id)?;
        let mut out: Vec<Generation> = ranked
            .iter()
            .take(n)
            .map(|&i| Generation::new(t.completions[i].clone()))
            .collect();
        let top = t.completions[ranked[0]].clone();
        while out.len() < n {
            out.push(Generation { text: top.clone(), padded: true });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy(logits: &[(&str, Vec<f64>)]) -> TabularPolicy {
        TabularPolicy {
            prompts: logits
                .iter()
                .map(|(id, l)| {
                    (
                        id.to_string(),
                        PromptTable {
                            completions: (0..l.len()).map(completion_id).collect(),
                            logits: l.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    fn random_policy(rng: &mut ChaCha8Rng, prompts: usize, v: usize) -> TabularPolicy {
        let spec: Vec<(String, Vec<f64>)> = (0..prompts)
            .map(|p| (format!("p{p}"), (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect()))
            .collect();
        policy(&spec.iter().map(|(a, b)| (a.as_str(), b.clone())).collect::<Vec<_>>())
    }

    fn random_rows(rng: &mut ChaCha8Rng, prompts: usize, v: usize, count: usize) -> Vec<DpoRow> {
        (0..count)
            .map(|_| {
                let chosen = rng.gen_range(0..v);
                let rejected = (chosen + rng.gen_range(1..v)) % v;
                DpoRow {
                    prompt_id: format!("p{}", rng.gen_range(0..prompts)),
                    chosen,
                    rejected,
                }
            })
            .collect()
    }

    fn fd_check<F: Fn(&TabularPolicy) -> f64>(p: &TabularPolicy, grad: &PolicyGradient, f: F) {
        let h = 1e-5;
        for (id, t) in &p.prompts {
            for i in 0..t.logits.len() {
                let mut plus = p.clone();
                plus.prompts.get_mut(id).unwrap().logits[i] += h;
                let mut minus = p.clone();
                minus.prompts.get_mut(id).unwrap().logits[i] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = grad[id][i];
                let err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-6, "{id}[{i}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn softmax_normalizes() {
        let p = policy(&[("x", vec![1.0, -2.0, 700.0, 3.5])]);
        let s: f64 = p.prompts["x"].probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sft_limits() {
        let uniform = policy(&[("x", vec![0.0; 4])]);
        let (l, _) = sft_loss(&uniform, &[SftRow { prompt_id: "x".into(), target: 2 }]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sharp = policy(&[("x", vec![0.0, 50.0, 0.0])]);
        let (l, _) = sft_loss(&sharp, &[SftRow { prompt_id: "x".into(), target: 1 }]).unwrap();
        assert!(l < 1e-9);
        assert!(sft_loss(&sharp, &[SftRow { prompt_id: "y".into(), target: 0 }]).is_err());
        assert!(sft_loss(&sharp, &[SftRow { prompt_id: "x".into(), target: 9 }]).is_err());
    }

    #[test]
    fn dpo_equal_policies_is_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_policy(&mut rng, 3, 5);
        for beta in [0.05, 0.1, 0.5] {
            let b = DpoBatch::new(random_rows(&mut rng, 3, 5, 7), beta).unwrap();
            assert_eq!(dpo_loss(&p, &p, &b).unwrap().0, std::f64::consts::LN_2);
        }
    }

    #[test]
    fn dpo_closed_form_margin() {
        // reference uniform, policy chosen logit 20 above rejected: margin 20, β·m = 2.0
        let reference = policy(&[("x", vec![0.0, 0.0])]);
        let p = policy(&[("x", vec![20.0, 0.0])]);
        let b = DpoBatch::new(vec![DpoRow { prompt_id: "x".into(), chosen: 0, rejected: 1 }], 0.1).unwrap();
        let (l, _) = dpo_loss(&p, &reference, &b).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        let p = policy(&[("x", vec![2.0, 0.0])]);
        let (l, _) = dpo_loss(&p, &reference, &DpoBatch::new(b.rows.clone(), 0.1).unwrap()).unwrap();
        assert!((l - 0.598139).abs() < 1e-6);
    }

    #[test]
    fn batch_invariants() {
        let row = DpoRow { prompt_id: "x".into(), chosen: 0, rejected: 0 };
        assert!(DpoBatch::new(vec![row.clone()], 0.1).is_err());
        let row = DpoRow { rejected: 1, ..row };
        assert!(DpoBatch::new(vec![row.clone()], 0.0).is_err());
        assert!(DpoBatch::new(vec![row], -1.0).is_err());
    }

    #[test]
    fn mismatched_universe_rejected() {
        let a = policy(&[("x", vec![0.0, 0.0])]);
        let b = policy(&[("x", vec![0.0, 0.0, 0.0])]);
        let batch = DpoBatch::new(vec![DpoRow { prompt_id: "x".into(), chosen: 0, rejected: 1 }], 0.1).unwrap();
        assert!(dpo_loss(&a, &b, &batch).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_policy(&mut rng, 2, 4);
            let r = random_policy(&mut rng, 2, 4);
            let rows = random_rows(&mut rng, 2, 4, 5);
            let batch = DpoBatch::new(rows, 0.5).unwrap();
            let (_, g) = dpo_loss(&p, &r, &batch).unwrap();
            fd_check(&p, &g, |q| dpo_loss(q, &r, &batch).unwrap().0);

            let sft: Vec<SftRow> = (0..4)
                .map(|_| SftRow {
                    prompt_id: format!("p{}", rng.gen_range(0..2)),
                    target: rng.gen_range(0..4),
                })
                .collect();
            let (_, g) = sft_loss(&p, &sft).unwrap();
            fd_check(&p, &g, |q| sft_loss(q, &sft).unwrap().0);
        }
    }

    #[test]
    fn beta_scales_gradient_at_reference() {
        let p = policy(&[("x", vec![0.3, -1.0, 2.0])]);
        let rows = vec![DpoRow { prompt_id: "x".into(), chosen: 2, rejected: 0 }];
        let (_, g1) = dpo_loss(&p, &p, &DpoBatch::new(rows.clone(), 0.1).unwrap()).unwrap();
        let (_, g2) = dpo_loss(&p, &p, &DpoBatch::new(rows, 0.2).unwrap()).unwrap();
        for (a, b) in g1["x"].iter().zip(&g2["x"]) {
            assert_eq!(*b, 2.0 * a);
        }
        // one descent step raises the chosen-vs-rejected log-ratio
        let mut q = p.clone();
        q.apply_gradient(&g1, 0.1);
        let lp = q.prompts["x"].log_probs();
        let lp0 = p.prompts["x"].log_probs();
        assert!(lp[2] - lp[0] > lp0[2] - lp0[0]);
    }

    #[test]
    fn loss_decreases_in_margin() {
        let reference = policy(&[("x", vec![0.0, 0.0])]);
        let batch = DpoBatch::new(vec![DpoRow { prompt_id: "x".into(), chosen: 0, rejected: 1 }], 0.1).unwrap();
        let mut last = f64::INFINITY;
        for m in -20..=20 {
            let p = policy(&[("x", vec![m as f64, 0.0])]);
            let (l, _) = dpo_loss(&p, &reference, &batch).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn training_drives_chosen_up() {
        let p = policy(&[("x", vec![0.0, 0.0])]);
        let batch = DpoBatch::new(vec![DpoRow { prompt_id: "x".into(), chosen: 1, rejected: 0 }], 0.1).unwrap();
        let out = train_toy(&p, &p, &batch, 200, 0.5).unwrap();
        assert!(out.policy.prompts["x"].probs()[1] > 0.99);
        assert_eq!(train_toy(&p, &p, &batch, 0, 0.5).unwrap().policy, p);
        let slow = train_toy(&p, &p, &batch, 100, 0.01).unwrap();
        assert!(slow.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.log_csv().starts_with("step,loss\n0,"));
    }

    #[test]
    fn divergence_reports_step() {
        let p = policy(&[("x", vec![0.0, 0.0])]);
        let broken = policy(&[("x", vec![f64::NAN, 0.0])]);
        let batch = DpoBatch::new(vec![DpoRow { prompt_id: "x".into(), chosen: 1, rejected: 0 }], 0.1).unwrap();
        assert!(matches!(train_toy(&broken, &p, &batch, 3, 0.1), Err(Error::Diverged { step: 0 })));
    }

    fn toy_record() -> QueryRecord {
        QueryRecord {
            query_id: "q1".into(),
            vague: "v".into(),
            specific: None,
            ground_truth: vec![],
            subset: Default::default(),
        }
    }

    #[test]
    fn greedy_toy_backend_takes_top_n() {
        let mut p = TabularPolicy::new();
        for t in ["b", "a", "c"] {
            p.intern("q1", t);
        }
        let rec = toy_record();
        let prompt = RewritePrompt::enhancement();
        let backend = ToyBackend::new(Arc::new(p.clone()), 7).greedy();
        let g = backend.generate(&prompt, &rec, 2).unwrap();
        assert_eq!(g.iter().map(|g| g.text.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(g, backend.generate(&prompt, &rec, 2).unwrap());

        let padded = backend.generate(&prompt, &rec, 5).unwrap();
        assert_eq!(padded.len(), 5);
        assert!(padded[3].padded && padded[3].text == "b");

        // after training, the chosen completion is candidate 0
        let batch = DpoBatch::new(vec![DpoRow { prompt_id: "q1".into(), chosen: 2, rejected: 0 }], 0.1).unwrap();
        let trained = train_toy(&p, &p, &batch, 50, 0.5).unwrap().policy;
        let g = ToyBackend::new(Arc::new(trained), 7).greedy().generate(&prompt, &rec, 1).unwrap();
        assert_eq!(g[0].text, "c");
    }

    #[test]
    fn sampling_toy_backend_follows_softmax() {
        let p = policy(&[("q1", vec![2.0, 0.0, -1.0])]);
        let rec = toy_record();
        let prompt = RewritePrompt::enhancement();
        let backend = ToyBackend::new(Arc::new(p.clone()), 3);
        let draws = backend.generate(&prompt, &rec, 20_000).unwrap();
        assert_eq!(draws, backend.generate(&prompt, &rec, 20_000).unwrap());
        let expected = p.table("q1").unwrap().probs();
        for (i, want) in expected.iter().enumerate() {
            let id = completion_id(i);
            let freq = draws.iter().filter(|g| g.text == id).count() as f64 / draws.len() as f64;
            assert!((freq - want).abs() < 0.02, "{id}: {freq} vs {want}");
        }
        let other = ToyBackend::new(Arc::new(p), 4).generate(&prompt, &rec, 50).unwrap();
        assert_ne!(other, draws[..50].to_vec());
    }

    #[test]
    fn policy_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_policy(&mut rng, 3, 3);
        p.save(&path).unwrap();
        assert_eq!(TabularPolicy::load(&path).unwrap(), p);
    }
}
