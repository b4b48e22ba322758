use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    generate_attributes, Fingerprint, KnowledgeBase, KnowledgeEntry, LlmClient, Provenance,
    RetryPolicy,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    spatial: Vec<String>,
    temporal: Vec<String>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    fingerprint: Fingerprint,
    entries: BTreeMap<String, EntryRecord>,
}

pub(super) fn to_json(kb: &KnowledgeBase) -> Result<String> {
    let file = KbFile {
        fingerprint: kb.fingerprint.clone(),
        entries: kb
            .entries
            .iter()
            .map(|(label, e)| {
                (
                    label.clone(),
                    EntryRecord {
                        spatial: e.spatial_attributes.clone(),
                        temporal: e.temporal_attributes.clone(),
                        provenance: e.provenance.clone(),
                    },
                )
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Writes the KB atomically: a sibling temp file is renamed over `path`.
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let json = to_json(kb)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("kb"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(json.as_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a KB. When `expected` is given, a differing
/// fingerprint is rejected unless `allow_mismatch` is set.
pub fn load_kb(
    path: &Path,
    expected: Option<&Fingerprint>,
    allow_mismatch: bool,
) -> Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema = |reason: String| Error::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let file: KbFile = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    if let Some(exp) = expected {
        if *exp != file.fingerprint && !allow_mismatch {
            return Err(Error::FingerprintMismatch {
                expected: exp.describe(),
                found: file.fingerprint.describe(),
            });
        }
    }
    let mut kb = KnowledgeBase::new(file.fingerprint);
    for (label, rec) in file.entries {
        let entry = KnowledgeEntry {
            label,
            spatial_attributes: rec.spatial,
            temporal_attributes: rec.temporal,
            provenance: rec.provenance,
        };
        entry
            .validate(kb.fingerprint.g, kb.fingerprint.l)
            .map_err(schema)?;
        kb.insert(entry);
    }
    Ok(kb)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub generated: Vec<String>,
    pub cached: Vec<String>,
    /// Labels that could not be generated, with the reason.
    pub failed: Vec<(String, String)>,
}

impl BuildReport {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Fills a KB for a label list, generating each class at most once.
pub struct KnowledgeBuilder<'a> {
    client: &'a dyn LlmClient,
    g: usize,
    l: usize,
    policy: RetryPolicy,
    max_inflight: usize,
}

impl<'a> KnowledgeBuilder<'a> {
    pub fn new(client: &'a dyn LlmClient, g: usize, l: usize) -> Self {
        Self {
            client,
            g,
            l,
            policy: RetryPolicy::default(),
            max_inflight: 4,
        }
    }

    pub fn retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::new(self.g, self.l, self.client.model_id())
    }

    /// Extends `kb` (or a fresh KB) so it covers `labels`. Cached labels
    /// trigger no client calls. Failures are collected in the report.
    pub fn build(
        &self,
        labels: &[String],
        kb: Option<KnowledgeBase>,
    ) -> Result<(KnowledgeBase, BuildReport)> {
        let fingerprint = self.fingerprint();
        let mut kb = match kb {
            Some(kb) if kb.fingerprint == fingerprint => kb,
            Some(kb) => {
                return Err(Error::FingerprintMismatch {
                    expected: fingerprint.describe(),
                    found: kb.fingerprint.describe(),
                })
            }
            None => KnowledgeBase::new(fingerprint),
        };
        let mut report = BuildReport::default();
        let mut todo = VecDeque::new();
        for label in labels {
            if kb.entries.contains_key(label) {
                report.cached.push(label.clone());
            } else if !todo.contains(label) {
                todo.push_back(label.clone());
            }
        }

        let queue = Mutex::new(todo);
        let results = Mutex::new(Vec::new());
        let workers = self.max_inflight.min(queue.lock().unwrap().len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let Some(label) = queue.lock().unwrap().pop_front() else {
                        break;
                    };
                    let r = generate_attributes(self.client, &label, self.g, self.l, &self.policy);
                    results.lock().unwrap().push((label, r));
                });
            }
        });

        let mut results = results.into_inner().unwrap();
        results.sort_by(|a, b| a.0.cmp(&b.0));
        for (label, r) in results {
            match r {
                Ok(entry) => {
                    report.generated.push(label);
                    kb.insert(entry);
                }
                Err(e) => report.failed.push((label, e.to_string())),
            }
        }
        Ok((kb, report))
    }
}
