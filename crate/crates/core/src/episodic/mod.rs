//! Episode sampling, episodic training and evaluation.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy_with_grad, Graph};
use crate::config::{KnowledgeConfig, RunConfig, ShotAggregation};
use crate::data::{
    augment, sample_frames, AugmentConfig, AugmentMode, Dataset, DatasetSplit, SamplingMode,
    SamplingPolicy,
};
use crate::encoders::{build_encoders, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::knowledge::{encode_entry, AttributeFeatures, Fingerprint, KnowledgeBase};
use crate::metrics::{cosine_distance, MatchScore};
use crate::model::{ClipFeatures, DistModel, EpisodeInputs, EpisodeScores};
use crate::params::{Adam, Mat};

/// One M-way K-shot task. Query labels index into `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub classes: Vec<String>,
    /// `support[c]` holds the K clip ids of class `c`.
    pub support: Vec<Vec<String>>,
    pub queries: Vec<String>,
    pub query_labels: Vec<usize>,
}

/// Independent RNG stream for episode `index` under `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `way` classes without replacement, then `shot + queries_per_class`
/// distinct clips from each.
pub fn sample_episode(
    split: &DatasetSplit,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    index: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if split.classes.len() < way {
        return Err(Error::InsufficientData(format!(
            "split {} has {} classes, episode needs {way}",
            split.name,
            split.classes.len()
        )));
    }
    let mut classes = split.classes.clone();
    classes.shuffle(rng);
    classes.truncate(way);
    let mut support = Vec::with_capacity(way);
    let mut queries = Vec::with_capacity(way * queries_per_class);
    let mut query_labels = Vec::with_capacity(way * queries_per_class);
    for (c, class) in classes.iter().enumerate() {
        let mut clips = split.clips_of(class).to_vec();
        if clips.len() < shot + queries_per_class {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} clips, episode needs {shot} support + {queries_per_class} query",
                clips.len()
            )));
        }
        clips.shuffle(rng);
        support.push(clips[..shot].to_vec());
        for q in &clips[shot..shot + queries_per_class] {
            queries.push(q.clone());
            query_labels.push(c);
        }
    }
    Ok(Episode {
        index,
        classes,
        support,
        queries,
        query_labels,
    })
}

/// `K = 1` returns the input; otherwise the elementwise mean of the shots.
pub fn aggregate_support(shots: &[crate::metrics::Prototypes]) -> crate::metrics::Prototypes {
    let mut out = shots[0].clone();
    for s in &shots[1..] {
        out.spatial += &s.spatial;
        out.frame += &s.frame;
    }
    if shots.len() > 1 {
        let k = shots.len() as f64;
        out.spatial /= k;
        out.frame /= k;
    }
    out
}

/// Decodes, samples, augments and encodes clips.
pub struct ClipLoader<'a> {
    pub dataset: &'a Dataset,
    pub encoder: &'a dyn VisualEncoder,
    pub frames: usize,
    /// `None` skips augmentation entirely.
    pub augment: Option<&'a AugmentConfig>,
}

impl ClipLoader<'_> {
    pub fn load(
        &self,
        clip_id: &str,
        class_id: usize,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<ClipFeatures> {
        let video = self.dataset.source.open(clip_id)?;
        let policy = SamplingPolicy {
            frames: self.frames,
            mode: if train {
                SamplingMode::TrainRandomPerSegment
            } else {
                SamplingMode::EvalCenterPerSegment
            },
        };
        let mut clip = sample_frames(video.as_ref(), &policy, class_id, clip_id, rng)?;
        if let Some(cfg) = self.augment {
            let mode = if train {
                AugmentMode::Train
            } else {
                AugmentMode::Eval
            };
            clip = augment(&clip, mode, cfg, rng)?;
        }
        let (f, x) = self.encoder.encode_video(&clip)?;
        Ok(ClipFeatures {
            frames: f.0,
            patches: x.0,
        })
    }

    pub fn load_episode(
        &self,
        episode: &Episode,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<LoadedEpisode> {
        let mut support = Vec::with_capacity(episode.support.len());
        for (c, ids) in episode.support.iter().enumerate() {
            support.push(
                ids.iter()
                    .map(|id| self.load(id, c, train, rng))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let queries = episode
            .queries
            .iter()
            .zip(&episode.query_labels)
            .map(|(id, &c)| self.load(id, c, train, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedEpisode {
            episode: episode.clone(),
            support,
            queries,
        })
    }
}

/// An episode with its clips encoded. Feature lists are empty when the
/// scorer does not look at clips.
pub struct LoadedEpisode {
    pub episode: Episode,
    pub support: Vec<Vec<ClipFeatures>>,
    pub queries: Vec<ClipFeatures>,
}

/// Encoded attributes of every class a run may see.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeFeatures {
    map: BTreeMap<String, AttributeFeatures>,
}

impl KnowledgeFeatures {
    /// Checks the KB against the configured attribute counts and that it
    /// covers every label, then encodes each entry once.
    pub fn encode(
        kb: &KnowledgeBase,
        labels: &[String],
        cfg: &KnowledgeConfig,
        text: &dyn TextEncoder,
    ) -> Result<Self> {
        if kb.fingerprint.g != cfg.g || kb.fingerprint.l != cfg.l {
            return Err(Error::FingerprintMismatch {
                expected: format!("G={} L={}", cfg.g, cfg.l),
                found: kb.fingerprint.describe(),
            });
        }
        kb.ensure_covers(labels.iter().map(String::as_str))?;
        let mut map = BTreeMap::new();
        for label in labels {
            if !map.contains_key(label) {
                map.insert(label.clone(), encode_entry(kb.get(label)?, text)?);
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, label: &str) -> Result<&AttributeFeatures> {
        self.map
            .get(label)
            .ok_or_else(|| Error::KnowledgeMiss(label.to_string()))
    }
}

fn inputs<'a>(
    loaded: &'a LoadedEpisode,
    knowledge: &'a KnowledgeFeatures,
) -> Result<EpisodeInputs<'a>> {
    Ok(EpisodeInputs {
        support: loaded.support.iter().map(|s| s.iter().collect()).collect(),
        queries: loaded.queries.iter().collect(),
        knowledge: loaded
            .episode
            .classes
            .iter()
            .map(|c| knowledge.get(c))
            .collect::<Result<Vec<_>>>()?,
    })
}

/// Scores and logits (`n_query x M`) of an encoded episode.
pub fn episode_forward(
    model: &DistModel,
    loaded: &LoadedEpisode,
    knowledge: &KnowledgeFeatures,
    shot_agg: ShotAggregation,
) -> Result<EpisodeScores> {
    model.score_episode(&inputs(loaded, knowledge)?, shot_agg)
}

/// Mean softmax cross-entropy over queries.
pub fn episode_loss(logits: &Mat, labels: &[usize]) -> f64 {
    cross_entropy_with_grad(logits, labels).0
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Mat, labels: &[usize]) -> f64 {
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: DistModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpisodeLog>,
}

/// Episodic training on the `train` split. Single-threaded; episode `i`
/// draws from its own RNG stream, so a run is a pure function of its inputs.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    kb: &KnowledgeBase,
    on_episode: &mut dyn FnMut(&EpisodeLog, &DistModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = dataset.split("train")?;
    let (visual, text) = build_encoders(&cfg.model.encoder)?;
    let knowledge =
        KnowledgeFeatures::encode(kb, &split.classes, &cfg.model.knowledge, text.as_ref())?;
    let mut model = DistModel::new(cfg.model.clone())?;
    let total = cfg.train.total_episodes();
    let mut adam = Adam::new(cfg.train.adam.clone(), &model.store, total);
    let loader = ClipLoader {
        dataset,
        encoder: visual.as_ref(),
        frames: cfg.model.encoder.frames,
        augment: cfg.train.augment.then_some(&cfg.augment),
    };
    let e = &cfg.episode;
    let mut log = Vec::with_capacity(total);
    for index in 0..total {
        let mut rng = episode_rng(cfg.train.seed, index);
        let episode = sample_episode(
            split,
            e.way,
            e.shot,
            e.train_queries_per_class,
            index,
            &mut rng,
        )?;
        let loaded = loader.load_episode(&episode, true, &mut rng)?;
        let mut g = Graph::new();
        let out = model.episode_graph(&mut g, &inputs(&loaded, &knowledge)?, e.shot_agg)?;
        let loss_var = g.cross_entropy(out.logits, &episode.query_labels);
        let loss = g.scalar(loss_var);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                episode: index,
                loss,
            });
        }
        let acc = accuracy(g.value(out.logits), &episode.query_labels);
        let grads = g.backward(loss_var);
        let lr = adam.learning_rate();
        adam.step(&mut model.store, grads.params());
        let entry = EpisodeLog {
            episode: index,
            loss,
            accuracy: acc,
            lr,
        };
        if cfg.train.log_every > 0 && (index + 1) % cfg.train.log_every == 0 {
            let from = log.len().saturating_sub(cfg.train.log_every - 1);
            let window: Vec<&EpisodeLog> =
                log[from..].iter().chain(std::iter::once(&entry)).collect();
            let n = window.len() as f64;
            log::info!(
                "episode {}/{total}: loss {:.4} acc {:.3} lr {:.1e}",
                index + 1,
                window.iter().map(|w| w.loss).sum::<f64>() / n,
                window.iter().map(|w| w.accuracy).sum::<f64>() / n,
                lr
            );
        }
        on_episode(&entry, &model);
        log.push(entry);
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        kb_fingerprint: kb.fingerprint.clone(),
        next_episode: total,
        params: model.store.clone(),
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}

/// Produces logits for an encoded episode.
pub trait EpisodeScorer: Sync {
    fn name(&self) -> &str;

    fn needs_features(&self) -> bool {
        true
    }

    fn logits(&self, loaded: &LoadedEpisode) -> Result<Mat>;
}

pub struct ModelScorer<'a> {
    pub model: &'a DistModel,
    pub knowledge: &'a KnowledgeFeatures,
    pub shot_agg: ShotAggregation,
}

impl EpisodeScorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn logits(&self, loaded: &LoadedEpisode) -> Result<Mat> {
        Ok(episode_forward(self.model, loaded, self.knowledge, self.shot_agg)?.logits)
    }
}

/// Puts `+inf` on the true class.
pub struct OracleScorer;

impl EpisodeScorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn needs_features(&self) -> bool {
        false
    }

    fn logits(&self, loaded: &LoadedEpisode) -> Result<Mat> {
        let e = &loaded.episode;
        let mut out = Mat::zeros((e.queries.len(), e.classes.len()));
        for (q, &l) in e.query_labels.iter().enumerate() {
            out[[q, l]] = f64::INFINITY;
        }
        Ok(out)
    }
}

/// I.i.d. uniform logits from a stream keyed by the episode index.
pub struct RandomScorer {
    pub seed: u64,
}

impl EpisodeScorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn needs_features(&self) -> bool {
        false
    }

    fn logits(&self, loaded: &LoadedEpisode) -> Result<Mat> {
        let e = &loaded.episode;
        let mut rng = episode_rng(self.seed, e.index);
        Ok(Mat::from_shape_simple_fn(
            (e.queries.len(), e.classes.len()),
            || rng.random(),
        ))
    }
}

/// Cosine similarity between time-averaged frame features; blind to frame order.
pub struct FrameMeanScorer;

impl EpisodeScorer for FrameMeanScorer {
    fn name(&self) -> &str {
        "frame_mean"
    }

    fn logits(&self, loaded: &LoadedEpisode) -> Result<Mat> {
        let mean = |clips: &[&ClipFeatures]| {
            let mut acc = clips[0].frames.mean_axis(ndarray::Axis(0)).expect("T >= 1");
            for c in &clips[1..] {
                acc += &c.frames.mean_axis(ndarray::Axis(0)).expect("T >= 1");
            }
            acc / clips.len() as f64
        };
        let protos: Vec<_> = loaded
            .support
            .iter()
            .map(|s| mean(&s.iter().collect::<Vec<_>>()))
            .collect();
        let mut out = Mat::zeros((loaded.queries.len(), protos.len()));
        for (q, clip) in loaded.queries.iter().enumerate() {
            let qm = mean(&[clip]);
            for (c, p) in protos.iter().enumerate() {
                out[[q, c]] = -cosine_distance(qm.view(), p.view())?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub split: String,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &RunConfig, split: &str) -> Self {
        Self {
            split: split.to_string(),
            way: cfg.episode.way,
            shot: cfg.episode.shot,
            queries_per_class: cfg.episode.eval_queries_per_class,
            episodes: cfg.eval.episodes,
            seed: cfg.eval.seed,
            workers: cfg.eval.workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub split: String,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub config_fingerprint: String,
}

/// Mean and 95% half-width (`1.96 * sd / sqrt(n)`, sample standard deviation).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Everything evaluation needs besides the scorer.
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub loader: ClipLoader<'a>,
    pub config_fingerprint: String,
}

/// Accuracy over `settings.episodes` episodes. Episode `i` uses stream `i`
/// of `settings.seed`, so the report does not depend on the worker count.
pub fn evaluate(
    scorer: &dyn EpisodeScorer,
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if settings.episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let split = ctx.dataset.split(&settings.split)?;
    let run = |index: usize| -> Result<f64> {
        let mut rng = episode_rng(settings.seed, index);
        let episode = sample_episode(
            split,
            settings.way,
            settings.shot,
            settings.queries_per_class,
            index,
            &mut rng,
        )?;
        let loaded = if scorer.needs_features() {
            ctx.loader.load_episode(&episode, false, &mut rng)?
        } else {
            LoadedEpisode {
                episode,
                support: Vec::new(),
                queries: Vec::new(),
            }
        };
        let logits = scorer.logits(&loaded)?;
        Ok(accuracy(&logits, &loaded.episode.query_labels))
    };
    let per_episode: Vec<f64> = if settings.workers <= 1 {
        (0..settings.episodes).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            (0..settings.episodes)
                .into_par_iter()
                .map(run)
                .collect::<Result<_>>()
        })?
    };
    let (mean_accuracy, ci95) = mean_ci95(&per_episode);
    Ok(EvalReport {
        scorer: scorer.name().to_string(),
        split: settings.split.clone(),
        n_episodes: settings.episodes,
        mean_accuracy,
        ci95,
        per_episode,
        config_fingerprint: ctx.config_fingerprint.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryDump {
    pub clip: String,
    pub label: usize,
    pub chosen: usize,
    pub scores: Vec<MatchScore>,
    /// Per class, `T x L` temporal attention of this query.
    pub attention: Vec<Option<Mat>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDump {
    pub episode: Episode,
    pub queries: Vec<QueryDump>,
}

/// Full per-query detail of evaluation episode `index`.
pub fn dump_episode(
    model: &DistModel,
    knowledge: &KnowledgeFeatures,
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
    shot_agg: ShotAggregation,
    index: usize,
) -> Result<EpisodeDump> {
    let split = ctx.dataset.split(&settings.split)?;
    let mut rng = episode_rng(settings.seed, index);
    let episode = sample_episode(
        split,
        settings.way,
        settings.shot,
        settings.queries_per_class,
        index,
        &mut rng,
    )?;
    let loaded = ctx.loader.load_episode(&episode, false, &mut rng)?;
    let scores = episode_forward(model, &loaded, knowledge, shot_agg)?;
    let queries = episode
        .queries
        .iter()
        .enumerate()
        .map(|(q, clip)| QueryDump {
            clip: clip.clone(),
            label: episode.query_labels[q],
            chosen: argmax(scores.logits.row(q)),
            scores: scores.scores[q].clone(),
            attention: scores.attention[q].clone(),
        })
        .collect();
    Ok(EpisodeDump { episode, queries })
}

/// Checkpoint-bound model scoring: the KB must match the one used in training.
pub fn check_kb_compatible(checkpoint: &Checkpoint, kb: &KnowledgeBase) -> Result<()> {
    if checkpoint.kb_fingerprint != kb.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: checkpoint.kb_fingerprint.describe(),
            found: kb.fingerprint.describe(),
        });
    }
    Ok(())
}

/// Fingerprint the training KB would need for a config.
pub fn expected_kb_fingerprint(cfg: &KnowledgeConfig, model_id: &str) -> Fingerprint {
    Fingerprint::new(cfg.g, cfg.l, model_id)
}
