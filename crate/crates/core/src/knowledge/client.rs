use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AttributeRequest, PromptKind, DEFAULT_MODEL_ID};
use crate::error::{Error, Result};

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &AttributeRequest<'_>) -> Result<String>;
    fn model_id(&self) -> &str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Attempts per prompt when the reply has the wrong number of items.
    pub max_attempts: usize,
    /// Extra attempts on transport failures, with exponential backoff.
    pub transport_retries: usize,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            transport_retries: 3,
            base_backoff_ms: 500,
        }
    }
}

pub(super) fn complete_with_backoff(
    client: &dyn LlmClient,
    req: &AttributeRequest<'_>,
    policy: &RetryPolicy,
) -> Result<String> {
    let mut attempt = 0;
    loop {
        match client.complete(req) {
            Err(Error::Transport(msg)) if attempt < policy.transport_retries => {
                let wait = policy.base_backoff_ms.saturating_mul(1 << attempt.min(16));
                log::warn!(
                    "LLM transport failure for {:?} ({msg}); retrying in {wait} ms",
                    req.label
                );
                thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
            other => return other,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct FixtureResponses {
    #[serde(default)]
    spatial: Option<String>,
    #[serde(default)]
    temporal: Option<String>,
}

/// Offline client answering from a JSON document
/// `{ "<label>": { "spatial": "...", "temporal": "..." } }`.
pub struct FixtureClient {
    responses: BTreeMap<String, FixtureResponses>,
    model_id: String,
    calls: AtomicUsize,
}

impl FixtureClient {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_map(responses))
    }

    pub fn new() -> Self {
        Self::from_map(BTreeMap::new())
    }

    fn from_map(responses: BTreeMap<String, FixtureResponses>) -> Self {
        Self {
            responses,
            model_id: DEFAULT_MODEL_ID.to_string(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn insert(&mut self, label: &str, kind: PromptKind, response: impl Into<String>) {
        let slot = self.responses.entry(label.to_string()).or_default();
        match kind {
            PromptKind::Spatial => slot.spatial = Some(response.into()),
            PromptKind::Temporal => slot.temporal = Some(response.into()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.responses)?)
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for FixtureClient {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmClient for FixtureClient {
    fn complete(&self, request: &AttributeRequest<'_>) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let entry = self.responses.get(request.label);
        let response = entry.and_then(|r| match request.kind {
            PromptKind::Spatial => r.spatial.clone(),
            PromptKind::Temporal => r.temporal.clone(),
        });
        response.ok_or_else(|| Error::MalformedResponse {
            label: request.label.to_string(),
            reason: format!("fixture has no {} response", request.kind.as_str()),
            raw: String::new(),
        })
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// Chat-completion style HTTP client.
pub struct HttpClient {
    base_url: String,
    model_id: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(
        base_url: impl Into<String>,
        model_id: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key,
            http,
        })
    }

    /// Reads `DIST_LLM_URL`, `DIST_LLM_MODEL` (optional) and `DIST_LLM_KEY` (optional).
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("DIST_LLM_URL").map_err(|_| {
            Error::Config("DIST_LLM_URL is not set and no fixture was given".into())
        })?;
        let model =
            std::env::var("DIST_LLM_MODEL").unwrap_or_else(|_| DEFAULT_MODEL_ID.to_string());
        let key = std::env::var("DIST_LLM_KEY").ok();
        Self::new(url, model, key)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.model_id,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        })
    }
}

pub(crate) fn extract_content(body: &serde_json::Value) -> Option<String> {
    body.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &AttributeRequest<'_>) -> Result<String> {
        let mut req = self
            .http
            .post(self.endpoint())
            .json(&self.request_body(&request.prompt));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Error::MalformedResponse {
                label: request.label.to_string(),
                reason: format!("HTTP {status}"),
                raw: text,
            });
        }
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::MalformedResponse {
                label: request.label.to_string(),
                reason: e.to_string(),
                raw: text.clone(),
            })?;
        extract_content(&body).ok_or_else(|| Error::MalformedResponse {
            label: request.label.to_string(),
            reason: "no choices[0].message.content".into(),
            raw: text,
        })
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}
