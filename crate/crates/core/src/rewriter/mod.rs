//! The rewriting boundary: turns a vague instruction into candidate
//! enhanced instructions through a pluggable text-generation backend.
//!
//! Backends never drop a candidate. Failed or empty generations are
//! replaced by the raw vague text and flagged, so a request for `n`
//! candidates always yields exactly `n`.

pub mod cache;
pub mod http;
mod mock;

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mock::{mock_rewrite, IdentityBackend, MockBackend};

use crate::corpus::{QueryRecord, ToolRef};
use crate::error::{Error, Result};

const VAGUE_GENERATION: &str = include_str!("../../assets/vague_generation.txt");
const ENHANCE_INSTRUCTION: &str = include_str!("../../assets/enhance_instruction.txt");

const INSTRUCTION_SLOT: &str = "{instruction}";
const APIS_SLOT: &str = "{APIs}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePrompt {
    pub template_id: String,
    pub template_text: String,
}

impl RewritePrompt {
    pub fn new(template_id: impl Into<String>, template_text: impl Into<String>) -> Result<Self> {
        let template_text = template_text.into();
        let slots = template_text.matches(INSTRUCTION_SLOT).count();
        if slots != 1 {
            return Err(Error::invalid(format!(
                "template must contain {INSTRUCTION_SLOT} exactly once, found {slots}"
            )));
        }
        Ok(Self {
            template_id: template_id.into(),
            template_text,
        })
    }

    /// Specific → vague direction, used to build vague datasets.
    pub fn vague_generation() -> Self {
        Self::new("vague-generation", VAGUE_GENERATION).expect("bundled template is valid")
    }

    /// Vague → specific direction, used at inference and for sampling.
    pub fn enhancement() -> Self {
        Self::new("enhance", ENHANCE_INSTRUCTION).expect("bundled template is valid")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom")
            .to_string();
        Self::new(id, text)
    }

    /// Fills the slots. `{APIs}` is only substituted in template text,
    /// never inside the instruction itself.
    pub fn render(&self, instruction: &str, apis: &[ToolRef]) -> String {
        let api_list = apis
            .iter()
            .map(|r| format!("[tool_name: {}, api_name: {}]", r.tool_name, r.api_name))
            .collect::<Vec<_>>()
            .join(", ");
        let (head, tail) = self
            .template_text
            .split_once(INSTRUCTION_SLOT)
            .expect("validated on construction");
        format!(
            "{}{}{}",
            head.replace(APIS_SLOT, &api_list),
            instruction,
            tail.replace(APIS_SLOT, &api_list)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateFlag {
    /// Backend returned an empty string; the vague text stands in.
    EmptyGeneration,
    /// Backend failed after retries; the vague text stands in.
    BackendFailure,
    /// Backend had fewer distinct completions than requested.
    Padded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRewrite {
    pub query_id: String,
    pub candidate_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<CandidateFlag>,
}

impl CandidateRewrite {
    /// Failed generations are never paired.
    pub fn is_failed(&self) -> bool {
        self.flags
            .iter()
            .any(|f| matches!(f, CandidateFlag::EmptyGeneration | CandidateFlag::BackendFailure))
    }
}

/// One generated text as reported by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub padded: bool,
}

impl Generation {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            padded: false,
        }
    }
}

/// A text-generation policy that rewrites vague instructions.
pub trait RewriteBackend: Send + Sync {
    /// Identifies the backend in reports, e.g. `mock` or `toy@iter2`.
    fn tag(&self) -> String;

    /// Produces up to `n` generations, in a stable order.
    fn generate(&self, prompt: &RewritePrompt, record: &QueryRecord, n: usize) -> Result<Vec<Generation>>;
}

/// Samples exactly `n` candidates for one record.
///
/// Backend errors are logged and turned into flagged stand-ins; they never
/// abort the caller's batch.
pub fn sample_candidates(
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    record: &QueryRecord,
    n: usize,
) -> Result<Vec<CandidateRewrite>> {
    if n == 0 {
        return Err(Error::invalid("number of candidates must be at least 1"));
    }
    let stand_in = |j: usize, flag: CandidateFlag| CandidateRewrite {
        query_id: record.query_id.clone(),
        candidate_index: j,
        text: record.vague.clone(),
        score: None,
        flags: vec![flag],
    };
    let generations = match backend.generate(prompt, record, n) {
        Ok(g) => g,
        Err(e) => {
            log::warn!("query {}: backend {} failed: {e}", record.query_id, backend.tag());
            return Ok((0..n).map(|j| stand_in(j, CandidateFlag::BackendFailure)).collect());
        }
    };
    let mut out: Vec<CandidateRewrite> = generations
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(j, g)| {
            let text = g.text.trim();
            if text.is_empty() {
                stand_in(j, CandidateFlag::EmptyGeneration)
            } else {
                CandidateRewrite {
                    query_id: record.query_id.clone(),
                    candidate_index: j,
                    text: text.to_string(),
                    score: None,
                    flags: if g.padded { vec![CandidateFlag::Padded] } else { Vec::new() },
                }
            }
        })
        .collect();
    while out.len() < n {
        out.push(stand_in(out.len(), CandidateFlag::EmptyGeneration));
    }
    Ok(out)
}

/// Samples every record with at most `concurrency` records in flight.
/// Output order equals input order.
pub fn sample_batch(
    backend: &dyn RewriteBackend,
    prompt: &RewritePrompt,
    records: &[QueryRecord],
    n: usize,
    concurrency: usize,
) -> Result<Vec<Vec<CandidateRewrite>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::Backend(e.to_string()))?;
    pool.install(|| {
        records
            .par_iter()
            .map(|r| sample_candidates(backend, prompt, r, n))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Identity,
    Toy,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http" | "http_endpoint" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            "identity" => Ok(BackendKind::Identity),
            "toy" => Ok(BackendKind::Toy),
            other => Err(Error::invalid(format!("unknown backend {other:?}"))),
        }
    }
}

/// Request/response shape spoken by the HTTP backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `{model, prompt, temperature, n, seed}` → `{candidates: [..]}`
    #[default]
    Native,
    /// OpenAI-compatible `/chat/completions`.
    OpenaiChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub api_style: ApiStyle,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    /// Maximum records with requests in flight.
    pub concurrency: usize,
    /// First mock candidate index; large values make every candidate carry
    /// all ground-truth tool names.
    pub mock_start: usize,
    /// Toy policy file (`policy.json`) for the toy backend.
    pub policy: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            api_style: ApiStyle::Native,
            model: "bridge".into(),
            temperature: 0.8,
            timeout_secs: 60.0,
            max_retries: 3,
            cache_dir: None,
            seed: 0,
            concurrency: 4,
            mock_start: 0,
            policy: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::config("backend.timeout_secs", "must be > 0"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config("backend.temperature", "must be >= 0"));
        }
        Ok(())
    }
}

/// Builds the non-toy backends; the toy backend needs a policy and is built
/// by the `dpo` module.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn RewriteBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(config.mock_start)),
        BackendKind::Identity => Arc::new(IdentityBackend),
        BackendKind::Http => Arc::new(http::HttpBackend::from_config(config)?),
        BackendKind::Toy => {
            let path = config
                .policy
                .as_ref()
                .ok_or_else(|| Error::config("backend.policy", "toy backend needs a policy file"))?;
            let policy = crate::dpo::TabularPolicy::load(path)?;
            Arc::new(crate::dpo::ToyBackend::new(Arc::new(policy), config.seed))
        }
    })
}
