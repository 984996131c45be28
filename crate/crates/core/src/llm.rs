//! Chat-completion and embedding providers.
//!
//! [`HttpChatProvider`] and [`HttpEmbeddingProvider`] speak the
//! OpenAI-compatible wire format. [`MockProvider`] replays scripted responses
//! keyed by a stable prompt hash and is what the test suites and
//! `--mock-script` runs use.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{parse_json, read_to_string, Error, Result};
use crate::prompts;

pub const DEFAULT_CREDENTIAL_ENV: &str = "CDMFILL_API_KEY";
pub const ENDPOINT_ENV: &str = "CDMFILL_ENDPOINT";
pub const MODEL_ENV: &str = "CDMFILL_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub max_output_tokens: u32,
    pub temperature: f32,
}

impl PromptBundle {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        PromptBundle {
            system_text: system_text.into(),
            user_text: user_text.into(),
            max_output_tokens: 2048,
            temperature: 0.0,
        }
    }

    /// Hex SHA-256 over the system and user text, separated by a NUL byte.
    pub fn hash(&self) -> String {
        prompt_hash(&self.system_text, &self.user_text)
    }
}

pub fn prompt_hash(system_text: &str, user_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(system_text.as_bytes());
    h.update([0u8]);
    h.update(user_text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub credential_ref: Option<String>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub retry_limit: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model_name: "meta-llama/Llama-3.1-8B-Instruct".into(),
            credential_ref: Some(DEFAULT_CREDENTIAL_ENV.into()),
            timeout: Duration::from_secs(120),
            retry_limit: 2,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs.is_finite() && secs > 0.0) {
            return Err(serde::de::Error::custom("timeout must be a positive number of seconds"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::Config("provider timeout must be positive".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("provider endpoint is empty".into()));
        }
        Ok(())
    }

    fn credential(&self) -> Option<String> {
        self.credential_ref
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|v| !v.is_empty())
    }

    fn url(&self, suffix: &str) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with(suffix) {
            base.to_string()
        } else {
            format!("{base}{suffix}")
        }
    }
}

/// One-shot completion against an HTTP provider.
pub fn complete(cfg: &ProviderConfig, prompt: &PromptBundle) -> Result<CompletionResult> {
    HttpChatProvider::new(cfg.clone())?.complete(prompt)
}

struct HttpClient {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    fn new(cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        Ok(HttpClient { cfg, client })
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with
    /// exponential backoff.
    fn post(&self, suffix: &str, body: &Value) -> Result<Value> {
        let url = self.cfg.url(suffix);
        let mut attempt = 0u32;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = self.cfg.credential() {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| Error::ProviderUnavailable(format!("invalid response body: {e}")));
                    }
                    let text = resp.text().unwrap_or_default();
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(Error::AuthFailure(format!("{status}: {text}")));
                    }
                    if status.is_server_error() || status.as_u16() == 429 {
                        Error::ProviderUnavailable(format!("{status}: {text}"))
                    } else {
                        return Err(Error::ProviderUnavailable(format!("{status}: {text}")));
                    }
                }
                Err(e) if e.is_timeout() => Error::Timeout(self.cfg.timeout),
                Err(e) => Error::ProviderUnavailable(e.to_string()),
            };
            if attempt >= self.cfg.retry_limit {
                return Err(outcome);
            }
            let backoff = Duration::from_millis(250u64.saturating_mul(1 << attempt.min(6)));
            tracing::warn!(url = %url, attempt, error = %outcome, "retrying provider call");
            std::thread::sleep(backoff);
            attempt += 1;
        }
    }
}

pub struct HttpChatProvider {
    http: HttpClient,
}

impl HttpChatProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self> {
        Ok(HttpChatProvider { http: HttpClient::new(cfg)? })
    }

    /// The request body sent for `prompt`.
    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        chat_request_body(&self.http.cfg.model_name, prompt)
    }
}

pub fn chat_request_body(model: &str, prompt: &PromptBundle) -> Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": prompt.user_text},
        ],
        "max_tokens": prompt.max_output_tokens,
        "temperature": prompt.temperature,
    })
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult> {
        let resp = self.http.post("/chat/completions", &self.request_body(prompt))?;
        let choice = resp
            .pointer("/choices/0")
            .ok_or_else(|| Error::ProviderUnavailable("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            None | Some("stop") | Some("eos") | Some("end_turn") => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let count = |k: &str| resp.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(CompletionResult {
            text,
            finish_reason,
            usage: Usage {
                prompt_tokens: count("prompt_tokens"),
                completion_tokens: count("completion_tokens"),
            },
        })
    }
}

pub struct HttpEmbeddingProvider {
    http: HttpClient,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self> {
        Ok(HttpEmbeddingProvider { http: HttpClient::new(cfg)? })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = json!({"model": self.http.cfg.model_name, "input": texts});
        let resp = self.http.post("/embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::ProviderUnavailable("embedding response has no data".into()))?;
        if data.len() != texts.len() {
            return Err(Error::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .map(|v| v.iter().map(|x| x.as_f64().unwrap_or(f64::NAN) as f32).collect())
                    .ok_or_else(|| Error::ProviderUnavailable("embedding entry lacks a vector".into()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockResponse {
    pub text: String,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl MockResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        MockResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
        }
    }
}

/// Fallback rule: the first rule whose `contains` text occurs in the user
/// prompt answers it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    #[serde(flatten)]
    pub response: MockResponse,
}

/// Mock script file: responses keyed by prompt hash, then substring rules,
/// then an optional default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: BTreeMap<String, MockResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockResponse>,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let value = parse_json(path, &read_to_string(path)?)?;
        serde_json::from_value(value).map_err(|e| Error::MalformedDocument {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn insert(&mut self, prompt: &PromptBundle, response: MockResponse) {
        self.responses.insert(prompt.hash(), response);
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    script: MockScript,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        MockProvider { script }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(MockScript::load(path)?))
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult> {
        let hash = prompt.hash();
        let response = self
            .script
            .responses
            .get(&hash)
            .or_else(|| {
                self.script
                    .rules
                    .iter()
                    .find(|r| prompt.user_text.contains(&r.contains))
                    .map(|r| &r.response)
            })
            .or(self.script.default.as_ref())
            .ok_or_else(|| Error::ProviderUnavailable(format!("mock script has no response for prompt {hash}")))?;
        Ok(CompletionResult {
            text: response.text.clone(),
            finish_reason: response.finish_reason,
            usage: Usage {
                prompt_tokens: estimate_tokens(&prompt.system_text) + estimate_tokens(&prompt.user_text),
                completion_tokens: estimate_tokens(&response.text),
            },
        })
    }
}

fn estimate_tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(4) as u64
}

/// Deterministic offline embedder: explicit vectors for known texts, a
/// hashed bag of lowercase tokens for everything else.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    fixed: BTreeMap<String, Vec<f32>>,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        MockEmbedder {
            dim: dim.max(1),
            fixed: BTreeMap::new(),
        }
    }

    pub fn with_vector(mut self, text: impl Into<String>, vector: Vec<f32>) -> Self {
        self.fixed.insert(text.into(), vector);
        self
    }

    fn hashed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in crate::kb::tokens(text) {
            let digest = Sha256::digest(token.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % self.dim;
            v[bucket] += 1.0;
        }
        v
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| self.fixed.get(t).cloned().unwrap_or_else(|| self.hashed(t)))
            .collect())
    }
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").expect("static regex"))
}

/// Pulls the first JSON object out of raw model output.
///
/// Fenced code blocks are searched first, then the whole text. Within each,
/// candidates are balanced `{...}` spans found by a string-aware scan.
pub fn extract_structured(text: &str) -> Result<Value> {
    for caps in fence_re().captures_iter(text) {
        if let Some(v) = first_object(&caps[1]) {
            return Ok(v);
        }
    }
    first_object(text).ok_or(Error::NoStructuredPayload)
}

fn first_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the brace closing the one at `open`, skipping string contents.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Asks the model for a natural-language description of a CDM example,
/// using real term sheets as style references.
pub fn synthesize_description(
    provider: &dyn ChatProvider,
    cdm_example: &Value,
    reference_texts: &[String],
) -> Result<String> {
    let empty = match cdm_example {
        Value::Null => true,
        Value::Object(o) => o.is_empty(),
        Value::Array(a) => a.is_empty(),
        _ => false,
    };
    if empty {
        return Err(Error::Precondition("CDM example must be non-empty".into()));
    }
    let cdm = serde_json::to_string_pretty(cdm_example)?;
    let references: String = reference_texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("\n## Reference term sheet {}\n{}\n", i + 1, t.trim()))
        .collect();
    let prompt = PromptBundle::new(
        prompts::render(prompts::SYNTHESIS_SYSTEM, &[]),
        prompts::render(prompts::SYNTHESIS_USER, &[("cdm", &cdm), ("references", &references)]),
    );
    let result = provider.complete(&prompt)?;
    if result.finish_reason == FinishReason::Length {
        return Err(Error::GenerationIncomplete);
    }
    Ok(result.text.trim().to_string())
}
