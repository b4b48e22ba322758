//! Output layout, run manifests and exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dist_core::data::{generate_synthetic, load_manifest, Dataset, SyntheticSpec};
use dist_core::Error;

use crate::DataArgs;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint";
pub const REPORTS: &str = "reports";
/// The KB a checkpoint was trained with, stored next to its parameters.
pub const CHECKPOINT_KB: &str = "kb.json";

/// Bad flags or arguments; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 1 usage, 2 data or knowledge error, 3 numerical abort.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFinite(_)) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

/// Record of one command run against an output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub kb_hash: Option<String>,
    pub data_hash: Option<String>,
    pub out_dir: PathBuf,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Files written by the command, relative to `out_dir`.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestFile {
    runs: Vec<RunManifest>,
}

/// Collects artifacts and timings while a command runs.
pub struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(out_dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            manifest: RunManifest {
                command: std::env::args().collect(),
                config: serde_json::Value::Null,
                kb_hash: None,
                data_hash: None,
                out_dir: out_dir.to_path_buf(),
                timings: BTreeMap::new(),
                artifacts: Vec::new(),
            },
            clock: Instant::now(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.manifest.out_dir
    }

    pub fn config(&mut self, config: &impl Serialize) {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn hashes(&mut self, kb: Option<String>, data: Option<String>) {
        self.manifest.kb_hash = kb;
        self.manifest.data_hash = data;
    }

    /// Time since the previous lap (or the start), recorded under `phase`.
    pub fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.manifest.timings.insert(
            phase.to_string(),
            now.duration_since(self.clock).as_secs_f64(),
        );
        self.clock = now;
    }

    /// Absolute path of `rel` under the output directory, recorded as an artifact.
    pub fn artifact(&mut self, rel: impl AsRef<Path>) -> anyhow::Result<PathBuf> {
        let rel = rel.as_ref();
        let path = self.manifest.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        if !self.manifest.artifacts.iter().any(|a| a == rel) {
            self.manifest.artifacts.push(rel.to_path_buf());
        }
        Ok(path)
    }

    /// Appends this run to `manifest.json` in the output directory.
    pub fn finish(self) -> anyhow::Result<()> {
        let path = self.manifest.out_dir.join(MANIFEST);
        let mut file: ManifestFile = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => ManifestFile::default(),
        };
        file.runs.push(self.manifest);
        std::fs::write(&path, serde_json::to_string_pretty(&file)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// `--data` is either a manifest (`splits` is an object) or a synthetic
/// spec (`splits` is an array of sizes), generated on the fly.
pub fn load_dataset(args: &DataArgs) -> anyhow::Result<Dataset> {
    let path = &args.data;
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if value
        .get("splits")
        .is_some_and(serde_json::Value::is_object)
    {
        return Ok(Dataset::from_manifest(load_manifest(path)?)?);
    }
    let spec: SyntheticSpec = serde_json::from_value(value).map_err(|e| Error::Schema {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let syn = generate_synthetic(&spec, args.data_seed)?;
    Ok(Dataset::from_manifest(syn.manifest)?)
}

pub fn write_csv<R: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = R>,
) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
