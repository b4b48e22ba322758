//! The trainable model: both compensators, an optional visual adapter, and
//! the differentiable episode scorer built from them.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, ShotAggregation};
use crate::encoders::{VideoClip, VisualEncoder};
use crate::error::{Error, Result};
use crate::knowledge::AttributeFeatures;
use crate::metrics::{MatchScore, Prototypes, TemporalMetric};
use crate::params::{Mat, ParamId, ParamStore};
use crate::skc::{QueryConditioning, Skc, SkcParams};
use crate::tkc::{Tkc, TkcParams};

/// Encoder output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    /// `T x C`
    pub frames: Mat,
    /// `T x P x C`
    pub patches: Array3<f64>,
}

/// Object prototypes stacked frame-major (`(T*N) x C`) and frame prototypes (`T x C`).
#[derive(Clone, Copy, Debug)]
pub struct ProtoVars {
    pub spatial: Var,
    pub frame: Var,
}

/// Graph nodes of one (query, class) comparison.
#[derive(Clone, Copy, Debug)]
pub struct PairTrace {
    pub spatial: Var,
    pub temporal: Var,
    pub fused: Var,
    /// `T x L` weights of the query's frames over the class's temporal
    /// attributes, when the query was conditioned on that class.
    pub attention: Option<Var>,
}

pub struct EpisodeGraph {
    /// `n_query x M`
    pub logits: Var,
    /// `pairs[q][c]`
    pub pairs: Vec<Vec<PairTrace>>,
}

/// Support clips per class (`M x K`), queries, and per-class knowledge.
pub struct EpisodeInputs<'a> {
    pub support: Vec<Vec<&'a ClipFeatures>>,
    pub queries: Vec<&'a ClipFeatures>,
    pub knowledge: Vec<&'a AttributeFeatures>,
}

#[derive(Clone, Debug)]
pub struct DistModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub skc: SkcParams,
    pub tkc: TkcParams,
    /// `C x C` map applied to the frozen visual features when the visual
    /// side is trainable; starts at the identity.
    pub adapter: Option<ParamId>,
}

impl DistModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let c = cfg.encoder.dim;
        let skc = SkcParams::init(&mut store, &cfg.skc, c, &mut rng);
        let tkc = TkcParams::init(&mut store, &cfg.tkc, cfg.encoder.frames, c, &mut rng);
        let adapter = cfg
            .encoder
            .visual_trainable
            .then(|| store.insert("visual.adapter", Array2::eye(c)));
        Ok(Self {
            cfg,
            store,
            skc,
            tkc,
            adapter,
        })
    }

    /// Rebuilds a model around saved parameter values, matched by name.
    pub fn from_store(cfg: ModelConfig, saved: &ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        if saved.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} parameters, model expects {}",
                saved.len(),
                model.store.len()
            )));
        }
        for (_, name, value) in saved.iter() {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(value);
        }
        Ok(model)
    }

    pub fn skc(&self) -> Skc<'_> {
        Skc {
            cfg: &self.cfg.skc,
            params: &self.skc,
            store: &self.store,
        }
    }

    pub fn tkc(&self) -> Tkc<'_> {
        Tkc {
            cfg: &self.cfg.tkc,
            params: &self.tkc,
            store: &self.store,
        }
    }

    pub fn encode_clip(
        &self,
        encoder: &dyn VisualEncoder,
        clip: &VideoClip,
    ) -> Result<ClipFeatures> {
        let (f, x) = encoder.encode_video(clip)?;
        Ok(ClipFeatures {
            frames: f.0,
            patches: x.0,
        })
    }

    fn check_clip(&self, clip: &ClipFeatures) -> Result<()> {
        let (t, c) = (self.cfg.encoder.frames, self.cfg.encoder.dim);
        if clip.frames.dim() != (t, c) || clip.patches.dim().0 != t || clip.patches.dim().2 != c {
            return Err(Error::Shape(format!(
                "clip features {:?}/{:?} do not match T={t}, C={c}",
                clip.frames.dim(),
                clip.patches.dim()
            )));
        }
        Ok(())
    }

    fn check_knowledge(&self, k: &AttributeFeatures) -> Result<()> {
        let c = self.cfg.encoder.dim;
        if k.spatial.ncols() != c
            || k.temporal.ncols() != c
            || k.spatial.nrows() == 0
            || k.temporal.nrows() == 0
        {
            return Err(Error::Shape(format!(
                "attribute features {:?}/{:?} do not match C={c}",
                k.spatial.dim(),
                k.temporal.dim()
            )));
        }
        Ok(())
    }

    /// Frame features and per-frame patch tokens as graph inputs.
    fn visual_inputs(&self, g: &mut Graph, clip: &ClipFeatures) -> (Var, Vec<Var>) {
        let f = g.constant(clip.frames.clone());
        let xs: Vec<Var> = clip
            .patches
            .axis_iter(Axis(0))
            .map(|x| g.constant(x.to_owned()))
            .collect();
        match self.adapter {
            None => (f, xs),
            Some(id) => {
                let a = g.param(&self.store, id);
                let f = g.matmul(f, a);
                let xs = xs.into_iter().map(|x| g.matmul(x, a)).collect();
                (f, xs)
            }
        }
    }

    fn knowledge_inputs(&self, g: &mut Graph, k: &AttributeFeatures) -> (Var, Var) {
        (
            g.constant(k.spatial.clone()),
            g.constant(k.temporal.clone()),
        )
    }

    /// Prototypes of one clip conditioned on one class's knowledge (or on none).
    pub fn clip_prototypes(
        &self,
        clip: &ClipFeatures,
        knowledge: Option<&AttributeFeatures>,
    ) -> Result<Prototypes> {
        self.check_clip(clip)?;
        if let Some(k) = knowledge {
            self.check_knowledge(k)?;
        }
        let mut g = Graph::new();
        let (f, xs) = self.visual_inputs(&mut g, clip);
        let agg = self.skc().aggregate(&mut g, &xs);
        let kv = knowledge.map(|k| self.knowledge_inputs(&mut g, k));
        let spatial = match kv {
            Some((qs, _)) => self.skc().inject_spatial_attributes(&mut g, agg, qs).0,
            None => agg,
        };
        let frame = self.tkc().forward(&mut g, f, kv.map(|(_, qt)| qt)).frames;
        let (t, n, c) = (
            self.cfg.encoder.frames,
            self.cfg.skc.num_prototypes,
            self.cfg.encoder.dim,
        );
        Ok(Prototypes {
            spatial: g
                .value(spatial)
                .clone()
                .into_shape_with_order((t, n, c))
                .expect("frame-major layout"),
            frame: g.value(frame).clone(),
        })
    }

    fn pair_distances(&self, g: &mut Graph, q: ProtoVars, s: ProtoVars) -> (Var, Var) {
        let m = &self.cfg.metric;
        let (t, n) = (self.cfg.encoder.frames, self.cfg.skc.num_prototypes);
        let flat = g.pairwise_distance(q.spatial, s.spatial, m.distance);
        let dhat = g.block_hausdorff(flat, (t, n), (t, n), !m.literal_alg1);
        let ds = g.bidirectional_min(dhat);
        let d = g.pairwise_distance(q.frame, s.frame, m.distance);
        let dt = match m.temporal {
            TemporalMetric::Otam => g.otam(d, m.smooth),
            TemporalMetric::BiMhm => g.bidirectional_min(d),
        };
        (ds, dt)
    }

    fn mean_of(g: &mut Graph, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = g.add(acc, v);
        }
        if vars.len() == 1 {
            acc
        } else {
            g.scale(acc, 1.0 / vars.len() as f64)
        }
    }

    /// Builds the episode's logits on `g`. Each clip's patch aggregation runs
    /// once; attribute injection and the temporal compensator run once per
    /// (clip, class) for queries and once per clip for support.
    pub fn episode_graph(
        &self,
        g: &mut Graph,
        inputs: &EpisodeInputs<'_>,
        shot_agg: ShotAggregation,
    ) -> Result<EpisodeGraph> {
        self.cfg.metric.validate()?;
        let m = inputs.support.len();
        if m == 0 || inputs.knowledge.len() != m {
            return Err(Error::Shape(format!(
                "{m} support classes but {} knowledge entries",
                inputs.knowledge.len()
            )));
        }
        for k in &inputs.knowledge {
            self.check_knowledge(k)?;
        }
        for clip in inputs.support.iter().flatten().chain(inputs.queries.iter()) {
            self.check_clip(clip)?;
        }
        if inputs.support.iter().any(Vec::is_empty) {
            return Err(Error::Shape("support class without clips".into()));
        }

        let skc = self.skc();
        let tkc = self.tkc();
        let know: Vec<(Var, Var)> = inputs
            .knowledge
            .iter()
            .map(|k| self.knowledge_inputs(g, k))
            .collect();

        // support: per class, per shot
        let mut support: Vec<Vec<ProtoVars>> = Vec::with_capacity(m);
        for (c, shots) in inputs.support.iter().enumerate() {
            let (qs, qt) = know[c];
            let per_shot = shots
                .iter()
                .map(|clip| {
                    let (f, xs) = self.visual_inputs(g, clip);
                    let agg = skc.aggregate(g, &xs);
                    ProtoVars {
                        spatial: skc.inject_spatial_attributes(g, agg, qs).0,
                        frame: tkc.forward(g, f, Some(qt)).frames,
                    }
                })
                .collect::<Vec<_>>();
            support.push(per_shot);
        }
        if shot_agg == ShotAggregation::MeanPrototypes {
            for shots in support.iter_mut() {
                if shots.len() > 1 {
                    let sp: Vec<Var> = shots.iter().map(|p| p.spatial).collect();
                    let fr: Vec<Var> = shots.iter().map(|p| p.frame).collect();
                    *shots = vec![ProtoVars {
                        spatial: Self::mean_of(g, &sp),
                        frame: Self::mean_of(g, &fr),
                    }];
                }
            }
        }

        let alpha = self.cfg.metric.alpha;
        let inv_tau = -1.0 / self.cfg.metric.temperature;
        let mut logits = Vec::with_capacity(inputs.queries.len() * m);
        let mut pairs = Vec::with_capacity(inputs.queries.len());
        for clip in &inputs.queries {
            let (f, xs) = self.visual_inputs(g, clip);
            let agg = skc.aggregate(g, &xs);
            let shared = match self.cfg.skc.query_conditioning {
                QueryConditioning::None => Some(ProtoVars {
                    spatial: agg,
                    frame: tkc.forward(g, f, None).frames,
                }),
                QueryConditioning::CandidateClass => None,
            };
            let mut row = Vec::with_capacity(m);
            for (c, shots) in support.iter().enumerate() {
                let (qp, attention) = match shared {
                    Some(p) => (p, None),
                    None => {
                        let (qs, qt) = know[c];
                        let out = tkc.forward(g, f, Some(qt));
                        (
                            ProtoVars {
                                spatial: skc.inject_spatial_attributes(g, agg, qs).0,
                                frame: out.frames,
                            },
                            out.attention,
                        )
                    }
                };
                let (ds_all, dt_all): (Vec<Var>, Vec<Var>) =
                    shots.iter().map(|s| self.pair_distances(g, qp, *s)).unzip();
                let spatial = Self::mean_of(g, &ds_all);
                let temporal = Self::mean_of(g, &dt_all);
                let weighted = g.scale(spatial, alpha);
                let fused = g.add(temporal, weighted);
                logits.push(g.scale(fused, inv_tau));
                row.push(PairTrace {
                    spatial,
                    temporal,
                    fused,
                    attention,
                });
            }
            pairs.push(row);
        }
        let logits = g.stack(&logits, inputs.queries.len(), m);
        Ok(EpisodeGraph { logits, pairs })
    }

    /// Forward-only evaluation of an episode.
    pub fn score_episode(
        &self,
        inputs: &EpisodeInputs<'_>,
        shot_agg: ShotAggregation,
    ) -> Result<EpisodeScores> {
        let mut g = Graph::new();
        let out = self.episode_graph(&mut g, inputs, shot_agg)?;
        let alpha = self.cfg.metric.alpha;
        let scores = out
            .pairs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| MatchScore {
                        spatial: g.scalar(p.spatial),
                        temporal: g.scalar(p.temporal),
                        fused: g.scalar(p.fused),
                        alpha,
                    })
                    .collect()
            })
            .collect();
        let attention = out
            .pairs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| p.attention.map(|a| g.value(a).clone()))
                    .collect()
            })
            .collect();
        Ok(EpisodeScores {
            logits: g.value(out.logits).clone(),
            scores,
            attention,
        })
    }
}

/// Values read off an [`EpisodeGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScores {
    pub logits: Mat,
    /// `scores[q][c]`
    pub scores: Vec<Vec<MatchScore>>,
    /// `attention[q][c]`: `T x L`, when the query was conditioned on class `c`.
    pub attention: Vec<Vec<Option<Mat>>>,
}
