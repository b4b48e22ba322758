//! Dataset ingestion: manifests and class splits, frame sampling, clip
//! augmentation, and pluggable video sources.

mod augment;
mod synthetic;

pub use augment::{augment, center_crop, crop, flip_horizontal, AugmentConfig, AugmentMode};
pub use synthetic::{
    generate_synthetic, render_clip_frames, SyntheticDataset, SyntheticSource, SyntheticSpec,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Frame, VideoClip};
use crate::error::{Error, Result};

/// Random access to the frames of one video.
pub trait Video {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves clip identifiers from a manifest into videos.
pub trait VideoSource: Send + Sync {
    fn open(&self, clip_id: &str) -> Result<Box<dyn Video + '_>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    TrainRandomPerSegment,
    #[default]
    EvalCenterPerSegment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub frames: usize,
    pub mode: SamplingMode,
}

/// Picks `policy.frames` indices from a video of `len` frames: one per equal
/// segment, at the segment center (eval) or uniformly inside it (train).
/// Segments shorter than one frame fall back to the frame nearest their
/// center, so short videos repeat frames. Indices never decrease.
pub fn sample_indices(
    len: usize,
    policy: &SamplingPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyVideo);
    }
    if policy.frames == 0 {
        return Err(Error::Config("frame count must be >= 1".into()));
    }
    let t = policy.frames;
    let seg = len as f64 / t as f64;
    let mut out = Vec::with_capacity(t);
    for k in 0..t {
        let center = (((k as f64 + 0.5) * seg).floor() as usize).min(len - 1);
        let start = (k as f64 * seg).ceil() as usize;
        let end = ((k + 1) as f64 * seg).ceil() as usize;
        let idx = match policy.mode {
            SamplingMode::TrainRandomPerSegment if end > start + 1 => {
                rng.random_range(start..end.min(len))
            }
            _ => center,
        };
        out.push(idx);
    }
    Ok(out)
}

pub fn sample_frames(
    video: &dyn Video,
    policy: &SamplingPolicy,
    class_id: usize,
    source_id: &str,
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    let idx = sample_indices(video.len(), policy, rng)?;
    let frames = idx
        .iter()
        .map(|&i| video.frame(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip {
        frames,
        class_id,
        source_id: source_id.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    #[serde(skip)]
    pub name: String,
    pub classes: Vec<String>,
    pub clips: BTreeMap<String, Vec<String>>,
    /// Declared class count, checked against `classes` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl DatasetSplit {
    pub fn clips_of(&self, class: &str) -> &[String] {
        self.clips.get(class).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Synthetic {
        spec: SyntheticSpec,
        seed: u64,
    },
    /// Each clip id is a directory of image files, read in lexicographic order.
    FrameDirs {
        root: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<String, DatasetSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSpec>,
}

impl Manifest {
    /// Split class lists must be pairwise disjoint and every class must have clips.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, split) in &self.splits {
            if let Some(n) = split.num_classes {
                if n != split.classes.len() {
                    return Err(Error::InsufficientData(format!(
                        "split {name} declares {n} classes but lists {}",
                        split.classes.len()
                    )));
                }
            }
            for class in &split.classes {
                if let Some(first) = owner.insert(class, name) {
                    return Err(Error::SplitOverlap {
                        class: class.clone(),
                        first: first.to_string(),
                        second: name.clone(),
                    });
                }
                if split.clips_of(class).is_empty() {
                    return Err(Error::MissingClip(format!("{name}/{class}")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::InsufficientData(format!("manifest has no split {name:?}")))
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.splits
            .values()
            .flat_map(|s| s.classes.iter().cloned())
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for (name, split) in manifest.splits.iter_mut() {
        split.name = name.clone();
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Loads one named split from a manifest file (validating all splits).
pub fn load_split(path: &Path, name: &str) -> Result<DatasetSplit> {
    load_manifest(path)?.split(name).cloned()
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// A manifest bound to the source that can decode its clips.
#[derive(Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub source: Arc<dyn VideoSource>,
}

impl Dataset {
    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let source: Arc<dyn VideoSource> = match &manifest.source {
            Some(SourceSpec::Synthetic { spec, seed }) => Arc::new(SyntheticSource::new(spec.clone(), *seed)?),
            Some(SourceSpec::FrameDirs { root }) => Arc::new(FrameDirSource { root: root.clone() }),
            None => {
                return Err(Error::Config(
                    "manifest names no video source; only synthetic and frame_dirs sources are built in".into(),
                ))
            }
        };
        Ok(Self { manifest, source })
    }

    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        self.manifest.split(name)
    }

    /// Same clips with every clip's class label replaced by a random class of
    /// the same split. Used as a null control: labels carry no signal.
    pub fn with_shuffled_labels(&self, rng: &mut impl Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut manifest = self.manifest.clone();
        for split in manifest.splits.values_mut() {
            let mut all: Vec<String> = split.clips.values().flatten().cloned().collect();
            all.shuffle(rng);
            let mut it = all.into_iter();
            for class in &split.classes {
                let n = split.clips[class].len();
                split
                    .clips
                    .insert(class.clone(), it.by_ref().take(n).collect());
            }
        }
        Self {
            manifest,
            source: self.source.clone(),
        }
    }
}

/// Reads clips stored as directories of still images.
pub struct FrameDirSource {
    pub root: PathBuf,
}

struct FrameDirVideo {
    files: Vec<PathBuf>,
}

impl Video for FrameDirVideo {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = &self.files[index];
        let img = image::open(path)
            .map_err(|e| Error::Schema {
                path: path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb32f();
        Ok(Frame {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.into_raw(),
        })
    }
}

impl VideoSource for FrameDirSource {
    fn open(&self, clip_id: &str) -> Result<Box<dyn Video + '_>> {
        let dir = self.root.join(clip_id);
        let rd = std::fs::read_dir(&dir).map_err(|_| Error::MissingClip(clip_id.to_string()))?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyVideo);
        }
        Ok(Box::new(FrameDirVideo { files }))
    }
}
