//! Completion collection from a chat-completions style HTTP endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use iapo::Stream;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::record::LogRecord;
use crate::{IngestError, Result};

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Concurrent requests in flight.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    /// Delay before the first retry; doubles per attempt up to `max_backoff_ms`.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_backoff")]
    pub max_backoff_ms: u64,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_parallelism() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_backoff() -> u64 {
    500
}
fn default_max_backoff() -> u64 {
    8000
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            api_key_env: None,
            parallelism: default_parallelism(),
            timeout_s: default_timeout(),
            backoff_ms: default_backoff(),
            max_backoff_ms: default_max_backoff(),
        }
    }
}

/// A prompt is sent as the system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub template: String,
}

/// A query is sent as the user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryText {
    pub id: String,
    pub text: String,
}

/// Pulls an answer label out of completion text: the first capture group of
/// the first match, or the whole match if the pattern has no groups.
#[derive(Debug, Clone)]
pub struct AnswerExtractor {
    pattern: Regex,
}

impl AnswerExtractor {
    pub fn new(pattern: &str) -> Result<Self> {
        Regex::new(pattern)
            .map(|pattern| Self { pattern })
            .map_err(|e| IngestError::Config(format!("answer pattern: {e}")))
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        let caps = self.pattern.captures(text)?;
        caps.get(1).or_else(|| caps.get(0)).map(|m| m.as_str().trim().to_string())
    }

    /// Fills `answer` on every ok record whose text matches.
    pub fn apply(&self, records: &mut [LogRecord]) {
        for r in records.iter_mut().filter(|r| r.is_ok()) {
            if let Some(t) = &r.text {
                r.answer = self.extract(t);
            }
        }
    }
}

struct Job<'a> {
    prompt: &'a PromptTemplate,
    query: &'a QueryText,
    seed: u64,
}

/// Requests `samples_per_pair` completions for every (prompt, query) pair.
/// Output is ordered by prompt, query, then sample, independent of timing.
/// Failed requests are retried with capped exponential backoff and, if still
/// failing, recorded as rows with an error status.
pub fn collect_completions(
    endpoint: &EndpointConfig,
    prompts: &[PromptTemplate],
    queries: &[QueryText],
    samples_per_pair: usize,
    rng: &Stream,
) -> Result<Vec<LogRecord>> {
    if endpoint.parallelism == 0 {
        return Err(IngestError::Config("parallelism must be positive".into()));
    }
    let api_key = match &endpoint.api_key_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| IngestError::Config(format!("environment variable {var} is not set")))?,
        ),
        None => None,
    };
    let mut jobs = Vec::with_capacity(prompts.len() * queries.len() * samples_per_pair);
    for p in prompts {
        for q in queries {
            let pair = rng.derive(&p.id).derive(&q.id);
            for s in 0..samples_per_pair {
                jobs.push(Job {
                    prompt: p,
                    query: q,
                    seed: pair.derive_u64(s as u64).id() >> 1,
                });
            }
        }
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(endpoint.timeout_s)))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<LogRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..endpoint.parallelism.min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let rec = run_job(&agent, &url, endpoint, api_key.as_deref(), job);
                *slots[i].lock().expect("slot lock") = Some(rec);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect())
}

fn run_job(agent: &ureq::Agent, url: &str, endpoint: &EndpointConfig, api_key: Option<&str>, job: &Job) -> LogRecord {
    let body = json!({
        "model": endpoint.model,
        "messages": [
            {"role": "system", "content": job.prompt.template},
            {"role": "user", "content": job.query.text},
        ],
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
        "seed": job.seed,
    });
    let mut delay = endpoint.backoff_ms;
    let mut last_error = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        match request(agent, url, api_key, &body) {
            Ok((text, tokens)) => {
                return LogRecord {
                    prompt_id: job.prompt.id.clone(),
                    query_id: job.query.id.clone(),
                    answer: None,
                    scores: None,
                    tokens,
                    status: "ok".into(),
                    text: Some(text),
                }
            }
            Err(e) => {
                log::debug!("attempt {attempt} for ({}, {}) failed: {e}", job.prompt.id, job.query.id);
                last_error = e;
            }
        }
        if attempt < MAX_ATTEMPTS {
            std::thread::sleep(Duration::from_millis(delay));
            delay = (delay * 2).min(endpoint.max_backoff_ms);
        }
    }
    LogRecord {
        prompt_id: job.prompt.id.clone(),
        query_id: job.query.id.clone(),
        answer: None,
        scores: None,
        tokens: 0,
        status: format!("error: {last_error}"),
        text: None,
    }
}

fn request(agent: &ureq::Agent, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<(String, u64), String> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(k) = api_key {
        req = req.header("Authorization", format!("Bearer {k}"));
    }
    let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
    let status = resp.status();
    if !status.is_success() {
        return Err(format!("HTTP {}", status.as_u16()));
    }
    let v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or("response has no choices[0].message.content")?
        .to_string();
    let tokens = v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0);
    Ok((text, tokens))
}
