//! Visual and text encoders.
//!
//! The stub backend stands in for a frozen dual encoder: its weights are drawn
//! from a counter-based generator keyed by a stable hash, so every call is a
//! pure function of the input and the configured seed. A pretrained backend
//! plugs in through the same two traits.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One RGB frame, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * 3 + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }
}

/// A sampled clip of exactly `T` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub class_id: usize,
    pub source_id: String,
}

/// Frame-level features `F`, `T x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures(pub Array2<f64>);

/// Patch tokens `X`, `T x P x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens(pub Array3<f64>);

/// A `C`-dimensional text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Array1<f64>);

pub trait VisualEncoder: Send + Sync {
    fn encode_video(&self, clip: &VideoClip) -> Result<(FrameFeatures, PatchTokens)>;
    fn dims(&self) -> EncoderDims;
}

pub trait TextEncoder: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding>;
    fn dim(&self) -> usize;
    /// Digest of everything that determines the encoder's output.
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub frames: usize,
    pub patches: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Stub,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub weights_path: Option<String>,
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Train a `C x C` adapter on top of the frozen visual features.
    pub visual_trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            weights_path: None,
            frames: 8,
            patches: 16,
            dim: 32,
            image_size: 32,
            seed: 0,
            visual_trainable: false,
        }
    }
}

pub type Encoders = (Arc<dyn VisualEncoder>, Arc<dyn TextEncoder>);

pub fn build_encoders(cfg: &EncoderConfig) -> Result<Encoders> {
    match cfg.backend {
        Backend::Stub => Ok((
            Arc::new(StubVisualEncoder::new(cfg)?),
            Arc::new(StubTextEncoder::new(cfg.dim, cfg.seed)),
        )),
        Backend::Pretrained => Err(Error::BackendUnavailable(format!(
            "no pretrained adapter is linked into this build (weights: {})",
            cfg.weights_path.as_deref().unwrap_or("<unset>")
        ))),
    }
}

fn keyed_rng(domain: &str, seed: u64, payload: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(payload);
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn gaussian_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Random-projection patch encoder. Each of the `P` patches (a square grid)
/// is projected to `C` dims, offset by a positional code and squashed; the
/// frame feature is a projection of an average-pooled thumbnail.
pub struct StubVisualEncoder {
    dims: EncoderDims,
    image_size: usize,
    grid: usize,
    thumb: usize,
    patch_proj: Array2<f64>,
    patch_pos: Array2<f64>,
    frame_proj: Array2<f64>,
}

impl StubVisualEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let grid = (cfg.patches as f64).sqrt().round() as usize;
        if grid * grid != cfg.patches || grid == 0 {
            return Err(Error::Config(format!(
                "patch count {} is not a square",
                cfg.patches
            )));
        }
        if !cfg.image_size.is_multiple_of(grid) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch grid {grid}",
                cfg.image_size
            )));
        }
        let thumb = if cfg.image_size.is_multiple_of(2 * grid) {
            2 * grid
        } else {
            grid
        };
        let side = cfg.image_size / grid;
        let patch_dim = side * side * 3;
        let frame_dim = thumb * thumb * 3;
        let mut rng = keyed_rng("stub-visual", cfg.seed, &[]);
        let patch_proj = gaussian_matrix(
            &mut rng,
            patch_dim,
            cfg.dim,
            2.0 / (patch_dim as f64).sqrt(),
        );
        let patch_pos = gaussian_matrix(&mut rng, cfg.patches, cfg.dim, 0.5);
        let frame_proj = gaussian_matrix(
            &mut rng,
            frame_dim,
            cfg.dim,
            2.0 / (frame_dim as f64).sqrt(),
        );
        Ok(Self {
            dims: EncoderDims {
                frames: cfg.frames,
                patches: cfg.patches,
                channels: cfg.dim,
            },
            image_size: cfg.image_size,
            grid,
            thumb,
            patch_proj,
            patch_pos,
            frame_proj,
        })
    }

    fn encode_frame(
        &self,
        frame: &Frame,
        feats: &mut Array2<f64>,
        tokens: &mut Array3<f64>,
        t: usize,
    ) {
        let side = self.image_size / self.grid;
        let mut patch = Array1::<f64>::zeros(side * side * 3);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut k = 0;
                for y in 0..side {
                    for x in 0..side {
                        for ch in 0..3 {
                            patch[k] = frame.get(gy * side + y, gx * side + x, ch) as f64 - 0.5;
                            k += 1;
                        }
                    }
                }
                let p = gy * self.grid + gx;
                let z = (patch.dot(&self.patch_proj) + self.patch_pos.row(p)).mapv(f64::tanh);
                tokens
                    .index_axis_mut(Axis(0), t)
                    .row_mut(p)
                    .assign(&normalize(z));
            }
        }

        let cell = self.image_size / self.thumb;
        let mut pooled = Array1::<f64>::zeros(self.thumb * self.thumb * 3);
        for ty in 0..self.thumb {
            for tx in 0..self.thumb {
                for ch in 0..3 {
                    let mut s = 0.0;
                    for y in 0..cell {
                        for x in 0..cell {
                            s += frame.get(ty * cell + y, tx * cell + x, ch) as f64;
                        }
                    }
                    pooled[(ty * self.thumb + tx) * 3 + ch] = s / (cell * cell) as f64 - 0.5;
                }
            }
        }
        let f = pooled.dot(&self.frame_proj).mapv(f64::tanh);
        feats.row_mut(t).assign(&normalize(f));
    }
}

impl VisualEncoder for StubVisualEncoder {
    fn encode_video(&self, clip: &VideoClip) -> Result<(FrameFeatures, PatchTokens)> {
        let EncoderDims {
            frames,
            patches,
            channels,
        } = self.dims;
        if clip.frames.len() != frames {
            return Err(Error::WrongFrameCount {
                expected: frames,
                got: clip.frames.len(),
            });
        }
        let mut feats = Array2::zeros((frames, channels));
        let mut tokens = Array3::zeros((frames, patches, channels));
        for (t, frame) in clip.frames.iter().enumerate() {
            if frame.height != self.image_size || frame.width != self.image_size {
                return Err(Error::Shape(format!(
                    "frame {t} is {}x{}, encoder expects {}x{}",
                    frame.height, frame.width, self.image_size, self.image_size
                )));
            }
            if frame.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pixel data"));
            }
            self.encode_frame(frame, &mut feats, &mut tokens, t);
        }
        Ok((FrameFeatures(feats), PatchTokens(tokens)))
    }

    fn dims(&self) -> EncoderDims {
        self.dims
    }
}

/// Bag of hash-seeded word vectors, normalized; no trainable state. Strings
/// that share words share directions, as with a real text encoder.
pub struct StubTextEncoder {
    dim: usize,
    seed: u64,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for StubTextEncoder {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let word = |bytes: &[u8]| {
            let mut rng = keyed_rng("stub-text", self.seed, bytes);
            Array1::from_shape_simple_fn(self.dim, || -> f64 { StandardNormal.sample(&mut rng) })
        };
        let lower = text.to_lowercase();
        let mut words = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .peekable();
        let v = if words.peek().is_none() {
            word(text.as_bytes())
        } else {
            words.fold(Array1::zeros(self.dim), |acc, w| acc + word(w.as_bytes()))
        };
        Ok(TextEmbedding(normalize(v)))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("stub-text:dim={}:seed={}", self.dim, self.seed)
    }
}
