//! Spatial knowledge compensator: learnable object prototypes that attend to
//! each other, aggregate the patch tokens of every frame, and then absorb the
//! class's spatial attribute features.
//!
//! All frames share the same parameters and nothing mixes across frames, so
//! the per-frame prototype blocks are stacked into one `(T*N) x C` matrix,
//! frame-major.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, logit_scale};
use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryConditioning {
    /// Inject the candidate class's attributes into the query before scoring it.
    #[default]
    CandidateClass,
    /// Queries receive no attribute knowledge.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkcConfig {
    pub num_prototypes: usize,
    pub heads: usize,
    pub literal_unscaled: bool,
    pub query_conditioning: QueryConditioning,
    pub prototype_init_std: f64,
}

impl Default for SkcConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 9,
            heads: 1,
            literal_unscaled: false,
            query_conditioning: QueryConditioning::CandidateClass,
            prototype_init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkcParams {
    pub prototypes: ParamId,
    pub self_q: ParamId,
    pub self_k: ParamId,
    pub self_v: ParamId,
    pub patch_k: ParamId,
    pub patch_v: ParamId,
    pub attr_k: ParamId,
    pub attr_v: ParamId,
}

impl SkcParams {
    pub fn init(store: &mut ParamStore, cfg: &SkcConfig, dim: usize, rng: &mut impl Rng) -> Self {
        let w = 1.0 / (dim as f64).sqrt();
        Self {
            prototypes: store.gaussian(
                "skc.prototypes",
                cfg.num_prototypes,
                dim,
                cfg.prototype_init_std,
                rng,
            ),
            self_q: store.gaussian("skc.self_q", dim, dim, w, rng),
            self_k: store.gaussian("skc.self_k", dim, dim, w, rng),
            self_v: store.gaussian("skc.self_v", dim, dim, w, rng),
            patch_k: store.gaussian("skc.patch_k", dim, dim, w, rng),
            patch_v: store.gaussian("skc.patch_v", dim, dim, w, rng),
            attr_k: store.gaussian("skc.attr_k", dim, dim, w, rng),
            attr_v: store.gaussian("skc.attr_v", dim, dim, w, rng),
        }
    }

    pub fn all(&self) -> [ParamId; 8] {
        [
            self.prototypes,
            self.self_q,
            self.self_k,
            self.self_v,
            self.patch_k,
            self.patch_v,
            self.attr_k,
            self.attr_v,
        ]
    }
}

/// `T x N x C` spatial prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPrototypes(pub Array3<f64>);

pub struct Skc<'a> {
    pub cfg: &'a SkcConfig,
    pub params: &'a SkcParams,
    pub store: &'a ParamStore,
}

impl Skc<'_> {
    fn dim(&self) -> usize {
        self.store.get(self.params.prototypes).ncols()
    }

    fn scale(&self) -> f64 {
        logit_scale(self.dim(), self.cfg.literal_unscaled)
    }

    /// Self-attention among the prototypes with a residual; returns the
    /// output and the `N x N` weights.
    pub fn prototype_self_attention(&self, g: &mut Graph, protos: Var) -> (Var, Var) {
        let p = self.params;
        let wq = g.param(self.store, p.self_q);
        let wk = g.param(self.store, p.self_k);
        let wv = g.param(self.store, p.self_v);
        let q = g.matmul(protos, wq);
        let k = g.matmul(protos, wk);
        let v = g.matmul(protos, wv);
        let a = attend(g, q, k, v, self.cfg.heads, self.scale());
        (g.add(a.out, protos), a.weights[0])
    }

    /// Prototypes attend (unprojected) to one frame's projected patch tokens.
    pub fn patch_aggregate(&self, g: &mut Graph, protos: Var, patches: Var) -> (Var, Var) {
        let wk = g.param(self.store, self.params.patch_k);
        let wv = g.param(self.store, self.params.patch_v);
        let k = g.matmul(patches, wk);
        let v = g.matmul(patches, wv);
        let a = attend(g, protos, k, v, self.cfg.heads, self.scale());
        (g.add(a.out, protos), a.weights[0])
    }

    /// Prototypes attend (unprojected) to the projected spatial attribute features.
    pub fn inject_spatial_attributes(&self, g: &mut Graph, protos: Var, attrs: Var) -> (Var, Var) {
        let wk = g.param(self.store, self.params.attr_k);
        let wv = g.param(self.store, self.params.attr_v);
        let k = g.matmul(attrs, wk);
        let v = g.matmul(attrs, wv);
        let a = attend(g, protos, k, v, self.cfg.heads, self.scale());
        (g.add(a.out, protos), a.weights[0])
    }

    /// Self-attention and per-frame patch aggregation; the class-independent
    /// half of the forward pass. Returns `(T*N) x C`.
    pub fn aggregate(&self, g: &mut Graph, frames: &[Var]) -> Var {
        let p0 = g.param(self.store, self.params.prototypes);
        let (p_self, _) = self.prototype_self_attention(g, p0);
        let per_frame: Vec<Var> = frames
            .iter()
            .map(|&x| self.patch_aggregate(g, p_self, x).0)
            .collect();
        g.concat_rows(&per_frame)
    }

    /// Full forward: `aggregate` then attribute injection (skipped when
    /// `attrs` is `None`). Returns `(T*N) x C`.
    pub fn forward(&self, g: &mut Graph, frames: &[Var], attrs: Option<Var>) -> Var {
        let agg = self.aggregate(g, frames);
        match attrs {
            Some(q) => self.inject_spatial_attributes(g, agg, q).0,
            None => agg,
        }
    }

    /// Array-in, array-out convenience around [`Skc::forward`].
    pub fn forward_values(
        &self,
        patches: &Array3<f64>,
        attrs: Option<&Array2<f64>>,
    ) -> SpatialPrototypes {
        let mut g = Graph::new();
        let frames: Vec<Var> = patches
            .axis_iter(Axis(0))
            .map(|x| g.constant(x.to_owned()))
            .collect();
        let q = attrs.map(|a| g.constant(a.clone()));
        let out = self.forward(&mut g, &frames, q);
        let (t, n, c) = (patches.dim().0, self.cfg.num_prototypes, self.dim());
        SpatialPrototypes(
            g.value(out)
                .clone()
                .into_shape_with_order((t, n, c))
                .expect("frame-major layout"),
        )
    }
}
