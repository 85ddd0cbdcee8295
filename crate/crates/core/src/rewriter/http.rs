//! HTTP clients for remote generation and embedding endpoints.
//!
//! Two request shapes are spoken. The native one posts
//! `{model, prompt, temperature, n, seed}` and expects `{candidates: [..]}`;
//! the OpenAI-compatible one posts chat messages and reads
//! `choices[0].message.content`. One request is issued per candidate with
//! `seed + index`, which keeps candidates cacheable independently.
//!
//! `TOOLBRIDGE_API_KEY`, when set, is sent as a bearer token.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::cache::{CacheKey, GenerationCache};
use super::{ApiStyle, BackendConfig, Generation, RewriteBackend, RewritePrompt};
use crate::corpus::QueryRecord;
use crate::error::{Error, Result};
use crate::retrieval::Embedder;

pub const API_KEY_ENV: &str = "TOOLBRIDGE_API_KEY";
pub const ENDPOINT_ENV: &str = "TOOLBRIDGE_ENDPOINT";

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn is_retryable(err: &ureq::Error) -> bool {
    match err {
        ureq::Error::Status(code, _) => *code == 429 || *code >= 500,
        ureq::Error::Transport(_) => true,
    }
}

/// POSTs `body` with exponential backoff on transport errors, 429 and 5xx.
fn post_json(agent: &ureq::Agent, url: &str, body: &Value, max_retries: u32, base_delay: Duration) -> Result<Value> {
    let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
    let mut attempt = 0;
    loop {
        let mut req = agent.post(url).set("Content-Type", "application/json");
        if let Some(k) = &key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                return resp
                    .into_json::<Value>()
                    .map_err(|e| Error::Backend(format!("{url}: malformed response body: {e}")))
            }
            Err(e) if attempt < max_retries && is_retryable(&e) => {
                let delay = base_delay * 2u32.saturating_pow(attempt);
                log::debug!("{url}: {e}; retry {} in {:?}", attempt + 1, delay);
                thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(Error::Backend(format!("{url}: {e}"))),
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    endpoint: String,
    style: ApiStyle,
    model: String,
    temperature: f64,
    seed: u64,
    max_retries: u32,
    base_delay: Duration,
    agent: ureq::Agent,
    cache: Option<GenerationCache>,
    calls: AtomicUsize,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::config("backend.endpoint", format!("required for the http backend (or set {ENDPOINT_ENV})")))?;
        let cache = config.cache_dir.as_deref().map(GenerationCache::open).transpose()?;
        Ok(Self {
            endpoint,
            style: config.api_style,
            model: config.model.clone(),
            temperature: config.temperature,
            seed: config.seed,
            max_retries: config.max_retries,
            base_delay: Duration::from_millis(200),
            agent: agent(Duration::from_secs_f64(config.timeout_secs)),
            cache,
            calls: AtomicUsize::new(0),
        })
    }

    /// Shortens the backoff; tests use it to keep retries fast.
    pub fn with_base_delay(mut self, delay: Duration) -> Self {
        self.base_delay = delay;
        self
    }

    /// Generation requests sent to the endpoint; retries of one request
    /// count once. Cache hits are not counted.
    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn request_one(&self, prompt: &str, seed: u64) -> Result<String> {
        let body = match self.style {
            ApiStyle::Native => json!({
                "model": self.model,
                "prompt": prompt,
                "temperature": self.temperature,
                "n": 1,
                "seed": seed,
            }),
            ApiStyle::OpenaiChat => json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
                "n": 1,
                "seed": seed,
            }),
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        let resp = post_json(&self.agent, &self.endpoint, &body, self.max_retries, self.base_delay)?;
        let text = match self.style {
            ApiStyle::Native => resp.pointer("/candidates/0"),
            ApiStyle::OpenaiChat => resp.pointer("/choices/0/message/content"),
        };
        text.and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Backend(format!("{}: response has no generated text", self.endpoint)))
    }
}

impl RewriteBackend for HttpBackend {
    fn tag(&self) -> String {
        format!("http:{}", self.model)
    }

    fn generate(&self, prompt: &RewritePrompt, record: &QueryRecord, n: usize) -> Result<Vec<Generation>> {
        let rendered = prompt.render(&record.vague, &[]);
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let key = CacheKey {
                template_id: &prompt.template_id,
                prompt: &rendered,
                model: &self.model,
                temperature: self.temperature,
                seed: self.seed,
                index: j,
            };
            if let Some(text) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                out.push(Generation::new(text));
                continue;
            }
            let text = self.request_one(&rendered, self.seed.wrapping_add(j as u64))?;
            if let Some(c) = &self.cache {
                c.put(&key, &text)?;
            }
            out.push(Generation::new(text));
        }
        Ok(out)
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug)]
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, timeout: Duration) -> Result<Self> {
        if endpoint.is_empty() {
            return Err(Error::config("retrieval.embedder.endpoint", "must not be empty"));
        }
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            agent: agent(timeout),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.model, "input": texts });
        let resp = post_json(&self.agent, &self.endpoint, &body, 3, Duration::from_millis(200))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Backend("embedding response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(Error::Backend(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|row| {
                row.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| Error::Backend("malformed embedding row".into()))
            })
            .collect()
    }
}
