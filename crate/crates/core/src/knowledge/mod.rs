//! Class-level attribute knowledge: prompting an LLM to decompose each action
//! label into related objects (spatial) and ordered action states (temporal),
//! validating the replies, caching them, and encoding them with the frozen
//! text encoder.

mod client;
mod store;

pub use client::{FixtureClient, HttpClient, LlmClient, RetryPolicy};
pub use store::{load_kb, save_kb, BuildReport, KnowledgeBuilder};

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};

pub const PROMPT_TEMPLATE_VERSION: &str = "v1";
pub const DEFAULT_MODEL_ID: &str = "gpt-3.5-turbo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Spatial,
    Temporal,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Spatial => "spatial",
            PromptKind::Temporal => "temporal",
        }
    }
}

pub fn build_spatial_prompt(label: &str, count: usize) -> String {
    format!("Given action label {{{label}}}, please generate {{{count}}} most related objects for each class.")
}

pub fn build_temporal_prompt(label: &str, count: usize) -> String {
    format!("Given action label {{{label}}}, please describe {{{count}}} states of each action in simple and short words.")
}

/// What the client is asked for; fixture clients key on `(label, kind)`,
/// live clients send `prompt`.
#[derive(Clone, Debug)]
pub struct AttributeRequest<'a> {
    pub label: &'a str,
    pub kind: PromptKind,
    pub count: usize,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeEntry {
    pub label: String,
    pub spatial_attributes: Vec<String>,
    /// Ordered action states.
    pub temporal_attributes: Vec<String>,
    pub provenance: Provenance,
}

impl KnowledgeEntry {
    pub fn validate(&self, g: usize, l: usize) -> std::result::Result<(), String> {
        if self.spatial_attributes.len() != g {
            return Err(format!(
                "{:?}: {} spatial attributes, expected {g}",
                self.label,
                self.spatial_attributes.len()
            ));
        }
        if self.temporal_attributes.len() != l {
            return Err(format!(
                "{:?}: {} temporal attributes, expected {l}",
                self.label,
                self.temporal_attributes.len()
            ));
        }
        if self
            .spatial_attributes
            .iter()
            .chain(&self.temporal_attributes)
            .any(|s| s.trim().is_empty())
        {
            return Err(format!("{:?}: empty attribute string", self.label));
        }
        Ok(())
    }
}

/// Encoded attributes of one class: `Q_s` (`G x C`) and `Q_t` (`L x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeFeatures {
    pub spatial: Array2<f64>,
    pub temporal: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub g: usize,
    pub l: usize,
    pub model_id: String,
    pub spatial_template: String,
    pub temporal_template: String,
}

impl Fingerprint {
    pub fn new(g: usize, l: usize, model_id: impl Into<String>) -> Self {
        Self {
            g,
            l,
            model_id: model_id.into(),
            spatial_template: PROMPT_TEMPLATE_VERSION.into(),
            temporal_template: PROMPT_TEMPLATE_VERSION.into(),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "G={} L={} model={} templates={}/{}",
            self.g, self.l, self.model_id, self.spatial_template, self.temporal_template
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub fingerprint: Fingerprint,
    pub entries: BTreeMap<String, KnowledgeEntry>,
}

impl KnowledgeBase {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            fingerprint,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, label: &str) -> Result<&KnowledgeEntry> {
        self.entries
            .get(label)
            .ok_or_else(|| Error::KnowledgeMiss(label.to_string()))
    }

    pub fn insert(&mut self, entry: KnowledgeEntry) {
        self.entries.insert(entry.label.clone(), entry);
    }

    /// Fails with the first label that has no entry.
    pub fn ensure_covers<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for label in labels {
            self.get(label)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = store::to_json(self).expect("knowledge base serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Splits an LLM reply into items: `;` or newline separated, numbering and
/// bullet prefixes stripped, trailing periods dropped, empties removed.
pub fn parse_items(raw: &str) -> Vec<String> {
    raw.split([';', '\n'])
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect()
}

fn clean_item(item: &str) -> String {
    let mut s = item.trim();
    // "1." / "2)" / "- " / "* "
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            s = r.trim_start();
        }
    }
    if let Some(r) = s.strip_prefix("- ").or_else(|| s.strip_prefix("* ")) {
        s = r.trim_start();
    }
    s.trim_end_matches('.').trim().to_string()
}

/// Case-insensitive dedup, keeping the first spelling.
pub fn dedup_case_insensitive(items: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

fn prompt_hash(spatial: &str, temporal: &str) -> String {
    let mut h = Sha256::new();
    h.update(spatial.as_bytes());
    h.update(b"\n");
    h.update(temporal.as_bytes());
    hex::encode(h.finalize())
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn request_items(
    client: &dyn LlmClient,
    label: &str,
    kind: PromptKind,
    count: usize,
    policy: &RetryPolicy,
) -> Result<Vec<String>> {
    let prompt = match kind {
        PromptKind::Spatial => build_spatial_prompt(label, count),
        PromptKind::Temporal => build_temporal_prompt(label, count),
    };
    let req = AttributeRequest {
        label,
        kind,
        count,
        prompt,
    };
    let mut last = None;
    for _ in 0..policy.max_attempts.max(1) {
        let raw = client::complete_with_backoff(client, &req, policy)?;
        let mut items = parse_items(&raw);
        if kind == PromptKind::Spatial {
            items = dedup_case_insensitive(items);
        }
        if items.len() == count {
            return Ok(items);
        }
        last = Some(Error::CountMismatch {
            label: label.to_string(),
            kind: kind.as_str(),
            expected: count,
            got: items.len(),
            raw,
        });
    }
    Err(last.expect("at least one attempt"))
}

/// Queries the client for both attribute sets of `label`.
pub fn generate_attributes(
    client: &dyn LlmClient,
    label: &str,
    g: usize,
    l: usize,
    policy: &RetryPolicy,
) -> Result<KnowledgeEntry> {
    if g == 0 || l == 0 {
        return Err(Error::Config("attribute counts must be >= 1".into()));
    }
    let spatial = request_items(client, label, PromptKind::Spatial, g, policy)?;
    let temporal = request_items(client, label, PromptKind::Temporal, l, policy)?;
    Ok(KnowledgeEntry {
        label: label.to_string(),
        spatial_attributes: spatial,
        temporal_attributes: temporal,
        provenance: Provenance {
            model_id: client.model_id().to_string(),
            prompt_hash: prompt_hash(
                &build_spatial_prompt(label, g),
                &build_temporal_prompt(label, l),
            ),
            timestamp: now_secs(),
        },
    })
}

fn encode_rows(items: &[String], encoder: &dyn TextEncoder) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((items.len(), encoder.dim()));
    for (i, s) in items.iter().enumerate() {
        out.row_mut(i).assign(&encoder.encode_text(s)?.0);
    }
    Ok(out)
}

/// Row `i` of `Q_s` encodes spatial attribute `i`; likewise for `Q_t`.
pub fn encode_entry(
    entry: &KnowledgeEntry,
    encoder: &dyn TextEncoder,
) -> Result<AttributeFeatures> {
    Ok(AttributeFeatures {
        spatial: encode_rows(&entry.spatial_attributes, encoder)?,
        temporal: encode_rows(&entry.temporal_attributes, encoder)?,
    })
}
