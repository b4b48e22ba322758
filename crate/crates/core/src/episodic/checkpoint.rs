use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::knowledge::Fingerprint;
use crate::model::DistModel;
use crate::params::{Mat, ParamStore};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in values.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: RunConfig,
    config_fingerprint: String,
    kb_fingerprint: Fingerprint,
    /// Training resumes from this episode index; episode RNG streams are
    /// derived from `(config.train.seed, index)`.
    next_episode: usize,
    tensors: Vec<TensorRecord>,
}

/// Trained parameters plus everything needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub kb_fingerprint: Fingerprint,
    pub next_episode: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DistModel> {
        DistModel::from_store(self.config.model.clone(), &self.params)
    }

    /// Writes `manifest.json` and `params.bin` (little-endian f64) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 8);
        let mut offset = 0;
        for (_, name, value) in self.params.iter() {
            tensors.push(TensorRecord {
                name: name.to_string(),
                rows: value.nrows(),
                cols: value.ncols(),
                offset,
            });
            for v in value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += value.len();
        }
        let manifest = CheckpointManifest {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            config_fingerprint: self.config.model.fingerprint(),
            kb_fingerprint: self.kb_fingerprint.clone(),
            next_episode: self.next_episode,
            tensors,
        };
        let blob_path = dir.join(BLOB);
        std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let man_path = dir.join(MANIFEST);
        std::fs::write(&man_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&man_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let schema = |reason: String| Error::Schema {
            path: man_path.clone(),
            reason,
        };
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(schema(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        if manifest.config_fingerprint != manifest.config.model.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: manifest.config.model.fingerprint(),
                found: manifest.config_fingerprint,
            });
        }
        let blob_path = dir.join(BLOB);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            let end = t.offset + t.rows * t.cols;
            if end > values.len() {
                return Err(schema(format!(
                    "tensor {} runs past the parameter blob",
                    t.name
                )));
            }
            let m = Mat::from_shape_vec((t.rows, t.cols), values[t.offset..end].to_vec())
                .map_err(|e| schema(e.to_string()))?;
            params.insert(t.name.clone(), m);
        }
        Ok(Self {
            config: manifest.config,
            kb_fingerprint: manifest.kb_fingerprint,
            next_episode: manifest.next_episode,
            params,
        })
    }
}
