//! Synthetic videos of small geometric objects. A class is an object set plus
//! an ordered sequence of motion phases for its first object (the actor).
//! Classes can come in time-reversed pairs that share every object, so only
//! frame order tells them apart.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Manifest, SourceSpec, Video, VideoSource};
use crate::encoders::Frame;
use crate::error::{Error, Result};
use crate::knowledge::{FixtureClient, PromptKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Class counts of the train, val and test splits, in that order.
    pub splits: [usize; 3],
    pub objects_per_class: usize,
    /// Motion phases per class.
    pub phases: usize,
    pub clips_per_class: usize,
    pub image_size: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Random objects added to every clip.
    pub distractors: usize,
    /// Actor displacement per phase, in pixels.
    pub step: usize,
    /// Pair consecutive classes of each split as time reversals of each other.
    pub reversed_pairs: bool,
    /// Spatial attributes per class in the emitted fixture.
    pub spatial_attributes: usize,
    /// Temporal attributes per class in the emitted fixture.
    pub temporal_attributes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 18,
            splits: [10, 3, 5],
            objects_per_class: 2,
            phases: 3,
            clips_per_class: 20,
            image_size: 32,
            min_frames: 24,
            max_frames: 40,
            noise: 0.05,
            distractors: 0,
            step: 6,
            reversed_pairs: true,
            spatial_attributes: 6,
            temporal_attributes: 3,
        }
    }
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const RADIUS: i64 = 3;
const JITTER: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Shape {
    Square,
    Disk,
    Cross,
    Ring,
    Bar,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Square,
    Shape::Disk,
    Shape::Cross,
    Shape::Ring,
    Shape::Bar,
    Shape::Diamond,
];

const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.1]),
    ("blue", [0.15, 0.25, 1.0]),
    ("yellow", [1.0, 0.95, 0.1]),
    ("magenta", [0.95, 0.1, 0.95]),
    ("cyan", [0.1, 0.95, 0.95]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.55, 0.05]),
];

const FILLERS: [&str; 8] = [
    "black background",
    "small object",
    "flat shape",
    "bright color",
    "moving object",
    "still object",
    "image border",
    "pixel noise",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ObjectKind {
    shape: Shape,
    color: usize,
}

impl ObjectKind {
    fn all() -> Vec<Self> {
        SHAPES
            .iter()
            .flat_map(|&shape| (0..COLORS.len()).map(move |color| Self { shape, color }))
            .collect()
    }

    fn name(&self) -> String {
        let shape = match self.shape {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::Diamond => "diamond",
        };
        format!("{} {shape}", COLORS[self.color].0)
    }

    fn covers(&self, dy: i64, dx: i64) -> bool {
        let r = RADIUS;
        match self.shape {
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Disk => dy * dy + dx * dx <= r * r + 1,
            Shape::Cross => (dy.abs() <= 1 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
            Shape::Ring => {
                let d = dy * dy + dx * dx;
                d <= r * r + 1 && d >= (r - 1) * (r - 1)
            }
            Shape::Bar => dy.abs() <= 1 && dx.abs() <= r,
            Shape::Diamond => dy.abs() + dx.abs() <= r,
        }
    }

    fn draw(&self, frame: &mut Frame, cy: f64, cx: f64) {
        let (cy, cx) = (cy.round() as i64, cx.round() as i64);
        let rgb = COLORS[self.color].1;
        for dy in -RADIUS..=RADIUS {
            for dx in -RADIUS..=RADIUS {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0
                    || x < 0
                    || y >= frame.height as i64
                    || x >= frame.width as i64
                    || !self.covers(dy, dx)
                {
                    continue;
                }
                for (c, v) in rgb.iter().enumerate() {
                    frame.set(y as usize, x as usize, c, *v);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    Right,
    Left,
    Up,
    Down,
}

impl Dir {
    const ALL: [Dir; 4] = [Dir::Right, Dir::Left, Dir::Up, Dir::Down];

    fn opposite(self) -> Self {
        match self {
            Dir::Right => Dir::Left,
            Dir::Left => Dir::Right,
            Dir::Up => Dir::Down,
            Dir::Down => Dir::Up,
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Dir::Right => (0, 1),
            Dir::Left => (0, -1),
            Dir::Up => (-1, 0),
            Dir::Down => (1, 0),
        }
    }

    fn word(self) -> &'static str {
        match self {
            Dir::Right => "right",
            Dir::Left => "left",
            Dir::Up => "up",
            Dir::Down => "down",
        }
    }
}

/// Motion of the actor as seen when played forward.
fn reversed_dirs(dirs: &[Dir]) -> Vec<Dir> {
    dirs.iter().rev().map(|d| d.opposite()).collect()
}

#[derive(Clone, Debug)]
struct Motion {
    objects: Vec<ObjectKind>,
    dirs: Vec<Dir>,
    /// Actor waypoints, `phases + 1` of them, `(y, x)`.
    waypoints: Vec<(f64, f64)>,
    statics: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
struct ClassDef {
    label: String,
    motion: usize,
    reversed: bool,
}

impl ClassDef {
    fn dirs(&self, motions: &[Motion]) -> Vec<Dir> {
        let m = &motions[self.motion];
        if self.reversed {
            reversed_dirs(&m.dirs)
        } else {
            m.dirs.clone()
        }
    }
}

fn degenerate(msg: impl Into<String>) -> Error {
    Error::DegenerateSpec(msg.into())
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(degenerate("need at least two classes"));
        }
        if self.splits.iter().sum::<usize>() != self.n_classes {
            return Err(degenerate(format!(
                "split sizes {:?} do not add up to {} classes",
                self.splits, self.n_classes
            )));
        }
        if self.objects_per_class == 0 || self.phases == 0 || self.clips_per_class == 0 {
            return Err(degenerate(
                "objects, phases and clips per class must be >= 1",
            ));
        }
        if self.objects_per_class > ObjectKind::all().len() {
            return Err(degenerate("more objects per class than object kinds"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(degenerate("frame count range is empty"));
        }
        if self.image_size < 4 * (RADIUS + JITTER) as usize {
            return Err(degenerate("image too small for the objects"));
        }
        if self.step == 0 {
            return Err(degenerate(
                "actor step must be >= 1 pixel, or classes differ only by name",
            ));
        }
        if self.spatial_attributes == 0 || self.temporal_attributes == 0 {
            return Err(degenerate("attribute counts must be >= 1"));
        }
        Ok(())
    }

    fn margin(&self) -> i64 {
        RADIUS + JITTER + 1
    }
}

fn sample_motion(
    spec: &SyntheticSpec,
    objects: Vec<ObjectKind>,
    rng: &mut ChaCha8Rng,
) -> Option<Motion> {
    let size = spec.image_size as i64;
    let m = spec.margin();
    for _ in 0..200 {
        let mut dirs = Vec::with_capacity(spec.phases);
        while dirs.len() < spec.phases {
            let d = *Dir::ALL.choose(rng).expect("non-empty");
            if dirs.last().is_some_and(|&p: &Dir| p.opposite() == d) {
                continue;
            }
            dirs.push(d);
        }
        let mut offs = vec![(0i64, 0i64)];
        for d in &dirs {
            let (py, px) = *offs.last().expect("non-empty");
            let (dy, dx) = d.delta();
            offs.push((py + dy * spec.step as i64, px + dx * spec.step as i64));
        }
        let (miny, maxy) = (
            offs.iter().map(|o| o.0).min()?,
            offs.iter().map(|o| o.0).max()?,
        );
        let (minx, maxx) = (
            offs.iter().map(|o| o.1).min()?,
            offs.iter().map(|o| o.1).max()?,
        );
        let (lo_y, hi_y) = (m - miny, size - 1 - m - maxy);
        let (lo_x, hi_x) = (m - minx, size - 1 - m - maxx);
        if lo_y > hi_y || lo_x > hi_x {
            continue;
        }
        let sy = rng.random_range(lo_y..=hi_y);
        let sx = rng.random_range(lo_x..=hi_x);
        let waypoints = offs
            .iter()
            .map(|&(y, x)| ((sy + y) as f64, (sx + x) as f64))
            .collect();
        let statics = (1..objects.len())
            .map(|_| {
                (
                    rng.random_range(m..size - m) as f64,
                    rng.random_range(m..size - m) as f64,
                )
            })
            .collect();
        return Some(Motion {
            objects,
            dirs,
            waypoints,
            statics,
        });
    }
    None
}

/// Per-clip randomness shared by every frame of the clip.
struct ClipLayout {
    len: usize,
    shift: (f64, f64),
    static_shift: Vec<(f64, f64)>,
    distractors: Vec<(ObjectKind, f64, f64)>,
    seed: u64,
}

/// Renders clips of a generated class set.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    spec: SyntheticSpec,
    seed: u64,
    motions: Vec<Motion>,
    classes: Vec<ClassDef>,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = ObjectKind::all();
        let mut used_sets: BTreeSet<Vec<ObjectKind>> = BTreeSet::new();
        let mut motions = Vec::new();
        let mut classes: Vec<ClassDef> = Vec::new();

        for &size in &spec.splits {
            let mut i = 0;
            while i < size {
                let mut motion = None;
                for _ in 0..1000 {
                    let objects: Vec<ObjectKind> = kinds
                        .choose_multiple(&mut rng, spec.objects_per_class)
                        .copied()
                        .collect();
                    let mut key = objects.clone();
                    key.sort();
                    if used_sets.contains(&key) {
                        continue;
                    }
                    if let Some(m) = sample_motion(&spec, objects, &mut rng) {
                        used_sets.insert(key);
                        motion = Some(m);
                        break;
                    }
                }
                let motion =
                    motion.ok_or_else(|| degenerate("cannot draw enough distinct classes"))?;
                let idx = motions.len();
                motions.push(motion);
                classes.push(ClassDef {
                    label: String::new(),
                    motion: idx,
                    reversed: false,
                });
                i += 1;
                if spec.reversed_pairs && i < size {
                    classes.push(ClassDef {
                        label: String::new(),
                        motion: idx,
                        reversed: true,
                    });
                    i += 1;
                }
            }
        }

        let mut seen = BTreeSet::new();
        for c in classes.iter_mut() {
            let m = &motions[c.motion];
            let dirs: Vec<&str> = c.dirs(&motions).iter().map(|d| d.word()).collect();
            let mut label = format!("{} goes {}", m.objects[0].name(), dirs.join("-"));
            if m.objects.len() > 1 {
                let others: Vec<String> = m.objects[1..].iter().map(|o| o.name()).collect();
                label.push_str(&format!(" near {}", others.join(" and ")));
            }
            if !seen.insert(label.clone()) {
                return Err(degenerate(format!(
                    "two classes render identically: {label}"
                )));
            }
            c.label = label;
        }
        Ok(Self {
            spec,
            seed,
            motions,
            classes,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    /// Index of the class rendered as the time reversal of `class`, if any.
    pub fn reversal_partner(&self, class: usize) -> Option<usize> {
        let c = &self.classes[class];
        self.classes
            .iter()
            .enumerate()
            .find(|(i, o)| *i != class && o.motion == c.motion)
            .map(|(i, _)| i)
    }

    fn clip_seed(&self, class: usize, clip: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((class as u64) << 32) | clip as u64);
        rng.random()
    }

    fn layout(&self, class: usize, clip_seed: u64) -> ClipLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
        let spec = &self.spec;
        let len = rng.random_range(spec.min_frames..=spec.max_frames);
        let mut jitter = || {
            (
                rng.random_range(-JITTER..=JITTER) as f64,
                rng.random_range(-JITTER..=JITTER) as f64,
            )
        };
        let shift = jitter();
        let static_shift = (0..self.motions[self.classes[class].motion].statics.len())
            .map(|_| jitter())
            .collect();
        let kinds = ObjectKind::all();
        let m = spec.margin();
        let size = spec.image_size as i64;
        let distractors = (0..spec.distractors)
            .map(|_| {
                let k = *kinds.choose(&mut rng).expect("non-empty");
                (
                    k,
                    rng.random_range(m..size - m) as f64,
                    rng.random_range(m..size - m) as f64,
                )
            })
            .collect();
        ClipLayout {
            len,
            shift,
            static_shift,
            distractors,
            seed: clip_seed,
        }
    }

    fn actor_position(motion: &Motion, s: f64) -> (f64, f64) {
        let phases = motion.waypoints.len() - 1;
        let u = s * phases as f64;
        let k = (u.floor() as usize).min(phases - 1);
        let f = u - k as f64;
        let (a, b) = (motion.waypoints[k], motion.waypoints[k + 1]);
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    }

    fn render_frame(&self, class: usize, layout: &ClipLayout, index: usize) -> Frame {
        let def = &self.classes[class];
        let motion = &self.motions[def.motion];
        let n = layout.len;
        // A reversed class plays its motion's timeline backwards, noise included.
        let t = if def.reversed { n - 1 - index } else { index };
        let s = if n > 1 {
            t as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let size = self.spec.image_size;
        let mut frame = Frame::new(size, size);
        for &(k, y, x) in &layout.distractors {
            k.draw(&mut frame, y, x);
        }
        for (i, &(y, x)) in motion.statics.iter().enumerate() {
            let (dy, dx) = layout.static_shift[i];
            motion.objects[i + 1].draw(&mut frame, y + dy, x + dx);
        }
        let (y, x) = Self::actor_position(motion, s);
        motion.objects[0].draw(&mut frame, y + layout.shift.0, x + layout.shift.1);
        if self.spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
            rng.set_stream(t as u64 + 1);
            let normal = Normal::new(0.0, self.spec.noise).expect("finite noise level");
            for v in frame.data.iter_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        frame
    }

    /// All frames of one clip, given the clip's own seed.
    pub fn render(&self, class: usize, clip_seed: u64) -> Vec<Frame> {
        let layout = self.layout(class, clip_seed);
        (0..layout.len)
            .map(|i| self.render_frame(class, &layout, i))
            .collect()
    }

    fn fixture_responses(&self, class: usize) -> (String, String) {
        let def = &self.classes[class];
        let motion = &self.motions[def.motion];
        let g = self.spec.spatial_attributes;
        let mut spatial: Vec<String> = motion.objects.iter().map(|o| o.name()).collect();
        for f in FILLERS {
            if spatial.len() >= g {
                break;
            }
            spatial.push(f.to_string());
        }
        spatial.truncate(g);
        let dirs = def.dirs(&self.motions);
        let actor = motion.objects[0].name();
        let l = self.spec.temporal_attributes;
        let temporal: Vec<String> = (0..l)
            .map(|k| {
                let p = (((k as f64 + 0.5) / l as f64) * dirs.len() as f64) as usize;
                format!("{actor} moves {}", dirs[p.min(dirs.len() - 1)].word())
            })
            .collect();
        (spatial.join("; "), temporal.join("; "))
    }
}

fn parse_clip_id(id: &str) -> Option<(usize, u64)> {
    let rest = id.strip_prefix("syn/")?;
    let (class, seed) = rest.split_once('/')?;
    Some((class.parse().ok()?, u64::from_str_radix(seed, 16).ok()?))
}

struct SyntheticVideo<'a> {
    source: &'a SyntheticSource,
    class: usize,
    layout: ClipLayout,
}

impl Video for SyntheticVideo<'_> {
    fn len(&self) -> usize {
        self.layout.len
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.layout.len {
            return Err(Error::Shape(format!(
                "frame {index} of {}",
                self.layout.len
            )));
        }
        Ok(self.source.render_frame(self.class, &self.layout, index))
    }
}

impl VideoSource for SyntheticSource {
    fn open(&self, clip_id: &str) -> Result<Box<dyn Video + '_>> {
        let (class, seed) = parse_clip_id(clip_id)
            .filter(|(c, _)| *c < self.classes.len())
            .ok_or_else(|| Error::MissingClip(clip_id.to_string()))?;
        Ok(Box::new(SyntheticVideo {
            source: self,
            class,
            layout: self.layout(class, seed),
        }))
    }
}

/// Frames of clip `clip` of class `class`, as the dataset would decode them.
pub fn render_clip_frames(source: &SyntheticSource, class: usize, clip: usize) -> Vec<Frame> {
    source.render(class, source.clip_seed(class, clip))
}

pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub source: SyntheticSource,
    /// Offline attribute responses naming each class's objects and phases.
    pub fixture: FixtureClient,
}

impl SyntheticDataset {
    pub fn labels(&self) -> Vec<String> {
        self.source.labels()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    let source = SyntheticSource::new(spec.clone(), seed)?;
    let mut splits = BTreeMap::new();
    let mut next = 0;
    for (name, &size) in SPLIT_NAMES.iter().zip(&spec.splits) {
        let range = next..next + size;
        next += size;
        let classes: Vec<String> = range
            .clone()
            .map(|c| source.classes[c].label.clone())
            .collect();
        let clips = range
            .map(|c| {
                let ids = (0..spec.clips_per_class)
                    .map(|k| format!("syn/{c}/{:016x}", source.clip_seed(c, k)))
                    .collect();
                (source.classes[c].label.clone(), ids)
            })
            .collect();
        splits.insert(
            name.to_string(),
            DatasetSplit {
                name: name.to_string(),
                num_classes: Some(classes.len()),
                classes,
                clips,
            },
        );
    }
    let mut fixture = FixtureClient::new();
    for c in 0..source.classes.len() {
        let (s, t) = source.fixture_responses(c);
        let label = &source.classes[c].label;
        fixture.insert(label, PromptKind::Spatial, s);
        fixture.insert(label, PromptKind::Temporal, t);
    }
    let manifest = Manifest {
        splits,
        source: Some(SourceSpec::Synthetic {
            spec: spec.clone(),
            seed,
        }),
    };
    manifest.validate()?;
    Ok(SyntheticDataset {
        manifest,
        source,
        fixture,
    })
}
