use image::imageops::{self, FilterType};
use image::Rgb32FImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Frame, VideoClip};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Fraction of the frame area kept by the crop.
    pub crop_area: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter`.
    pub jitter: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_area: 0.875,
            jitter: 0.1,
            flip_prob: 0.5,
        }
    }
}

pub fn crop(frame: &Frame, y: usize, x: usize, h: usize, w: usize) -> Result<Frame> {
    if y + h > frame.height || x + w > frame.width || h == 0 || w == 0 {
        return Err(Error::CropTooLarge {
            crop_h: h,
            crop_w: w,
            h: frame.height,
            w: frame.width,
        });
    }
    let mut out = Frame::new(h, w);
    for r in 0..h {
        let src = frame.idx(y + r, x, 0);
        let dst = out.idx(r, 0, 0);
        out.data[dst..dst + w * 3].copy_from_slice(&frame.data[src..src + w * 3]);
    }
    Ok(out)
}

pub fn center_crop(frame: &Frame, h: usize, w: usize) -> Result<Frame> {
    if h > frame.height || w > frame.width {
        return Err(Error::CropTooLarge {
            crop_h: h,
            crop_w: w,
            h: frame.height,
            w: frame.width,
        });
    }
    crop(frame, (frame.height - h) / 2, (frame.width - w) / 2, h, w)
}

pub fn flip_horizontal(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            for c in 0..3 {
                out.set(y, x, c, frame.get(y, frame.width - 1 - x, c));
            }
        }
    }
    out
}

fn resize(frame: &Frame, h: usize, w: usize) -> Frame {
    if frame.height == h && frame.width == w {
        return frame.clone();
    }
    let img = Rgb32FImage::from_raw(frame.width as u32, frame.height as u32, frame.data.clone())
        .expect("frame buffer matches its dimensions");
    let out = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    Frame {
        height: h,
        width: w,
        data: out.into_raw(),
    }
}

fn crop_size(frame: &Frame, area: f64) -> (usize, usize) {
    let s = area.clamp(0.0, 1.0).sqrt();
    let h = ((frame.height as f64 * s).round() as usize).max(1);
    let w = ((frame.width as f64 * s).round() as usize).max(1);
    (h, w)
}

struct Jitter {
    brightness: f32,
    contrast: f32,
    saturation: f32,
}

impl Jitter {
    fn apply(&self, frame: &mut Frame) {
        let n = (frame.height * frame.width) as f32;
        let mean = frame.data.iter().sum::<f32>() / (3.0 * n);
        for px in frame.data.chunks_exact_mut(3) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px.iter_mut() {
                let mut x = *v * self.brightness;
                x = (x - mean) * self.contrast + mean;
                x = (x - gray) * self.saturation + gray;
                *v = x.clamp(0.0, 1.0);
            }
        }
    }
}

/// Train mode: one flip decision, one crop window and one set of jitter
/// factors per clip, then resize back to the input size. Eval mode: center
/// crop and resize only.
pub fn augment(
    clip: &VideoClip,
    mode: AugmentMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    let Some(first) = clip.frames.first() else {
        return Err(Error::EmptyVideo);
    };
    let (h, w) = (first.height, first.width);
    let (ch, cw) = crop_size(first, cfg.crop_area);
    let mut frames = Vec::with_capacity(clip.frames.len());
    match mode {
        AugmentMode::Eval => {
            for f in &clip.frames {
                frames.push(resize(&center_crop(f, ch, cw)?, f.height, f.width));
            }
        }
        AugmentMode::Train => {
            let flip = rng.random::<f64>() < cfg.flip_prob;
            let y = rng.random_range(0..=h.saturating_sub(ch));
            let x = rng.random_range(0..=w.saturating_sub(cw));
            let j = cfg.jitter as f32;
            let mut factor = || {
                if j > 0.0 {
                    rng.random_range(1.0 - j..=1.0 + j)
                } else {
                    1.0
                }
            };
            let jitter = Jitter {
                brightness: factor(),
                contrast: factor(),
                saturation: factor(),
            };
            for f in &clip.frames {
                let mut out = resize(&crop(f, y, x, ch, cw)?, f.height, f.width);
                if flip {
                    out = flip_horizontal(&out);
                }
                jitter.apply(&mut out);
                frames.push(out);
            }
        }
    }
    Ok(VideoClip {
        frames,
        class_id: clip.class_id,
        source_id: clip.source_id.clone(),
    })
}
