//! Temporal knowledge compensator: a pooled temporal-attribute vector is
//! added to every frame feature, frames cross-attend to the ordered temporal
//! attributes, and a small pre-norm transformer relates the frames.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, logit_scale};
use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TkcConfig {
    pub heads: usize,
    pub pool: Pooling,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub literal_unscaled: bool,
}

impl Default for TkcConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            pool: Pooling::Mean,
            blocks: 1,
            ffn_mult: 2,
            literal_unscaled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: Vec<ParamId>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TkcParams {
    pub attr_k: ParamId,
    pub attr_v: ParamId,
    /// Learned positional encodings, one row per frame.
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl TkcParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: &TkcConfig,
        frames: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = 1.0 / (dim as f64).sqrt();
        let attr_k = store.gaussian("tkc.attr_k", dim, dim, w, rng);
        let attr_v = store.gaussian("tkc.attr_v", dim, dim, w, rng);
        let positions = store.gaussian("tkc.positions", frames, dim, 0.02, rng);
        assert!(
            cfg.heads >= 1 && dim.is_multiple_of(cfg.heads),
            "dim {dim} not divisible by {} heads",
            cfg.heads
        );
        let hd = dim / cfg.heads;
        let hidden = dim * cfg.ffn_mult;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let name = |s: &str| format!("tkc.block{b}.{s}");
                let ones = Array2::ones((1, dim));
                let zeros = Array2::zeros((1, dim));
                let mut per_head = |s: &str, rows, cols, std, rng: &mut _| {
                    (0..cfg.heads)
                        .map(|h| store.gaussian(&name(&format!("{s}{h}")), rows, cols, std, rng))
                        .collect::<Vec<_>>()
                };
                let wq = per_head("wq", dim, hd, w, rng);
                let wk = per_head("wk", dim, hd, w, rng);
                let wv = per_head("wv", dim, hd, w, rng);
                let wo = per_head("wo", hd, dim, 0.02, rng);
                BlockParams {
                    ln1_gain: store.insert(name("ln1_gain"), ones.clone()),
                    ln1_bias: store.insert(name("ln1_bias"), zeros.clone()),
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2_gain: store.insert(name("ln2_gain"), ones),
                    ln2_bias: store.insert(name("ln2_bias"), zeros),
                    ff1: store.gaussian(&name("ff1"), dim, hidden, w, rng),
                    ff1_bias: store.insert(name("ff1_bias"), Array2::zeros((1, hidden))),
                    ff2: store.gaussian(&name("ff2"), hidden, dim, 0.02, rng),
                    ff2_bias: store.insert(name("ff2_bias"), Array2::zeros((1, dim))),
                }
            })
            .collect();
        Self {
            attr_k,
            attr_v,
            positions,
            blocks,
        }
    }
}

/// `T x C` frame-level prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrototypes(pub Array2<f64>);

pub struct TkcOutput {
    pub frames: Var,
    /// `T x L` frame-to-attribute weights, when attributes were injected.
    pub attention: Option<Var>,
}

pub struct Tkc<'a> {
    pub cfg: &'a TkcConfig,
    pub params: &'a TkcParams,
    pub store: &'a ParamStore,
}

impl Tkc<'_> {
    fn dim(&self) -> usize {
        self.store.get(self.params.attr_k).nrows()
    }

    /// `1 x C` global semantic vector.
    pub fn pool_temporal_attributes(&self, g: &mut Graph, attrs: Var) -> Var {
        match self.cfg.pool {
            Pooling::Mean => g.mean_rows(attrs),
            Pooling::Max => g.max_rows(attrs),
        }
    }

    pub fn fuse_global(&self, g: &mut Graph, frames: Var, global: Var) -> Var {
        g.add_row(frames, global)
    }

    /// Frames attend to the projected temporal attributes, plus residual.
    pub fn inject_temporal_attributes(&self, g: &mut Graph, frames: Var, attrs: Var) -> (Var, Var) {
        let wk = g.param(self.store, self.params.attr_k);
        let wv = g.param(self.store, self.params.attr_v);
        let k = g.matmul(attrs, wk);
        let v = g.matmul(attrs, wv);
        let a = attend(
            g,
            frames,
            k,
            v,
            1,
            logit_scale(self.dim(), self.cfg.literal_unscaled),
        );
        (g.add(a.out, frames), a.weights[0])
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = g.layer_norm(x);
        let gv = g.param(self.store, gain);
        let bv = g.param(self.store, bias);
        let n = g.mul_row(n, gv);
        g.add_row(n, bv)
    }

    fn block(&self, g: &mut Graph, x: Var, b: &BlockParams) -> Var {
        let heads = b.wq.len();
        let scale = 1.0 / ((self.dim() / heads) as f64).sqrt();
        let h = self.norm(g, x, b.ln1_gain, b.ln1_bias);
        let mut mixed = None;
        for i in 0..heads {
            let wq = g.param(self.store, b.wq[i]);
            let wk = g.param(self.store, b.wk[i]);
            let wv = g.param(self.store, b.wv[i]);
            let wo = g.param(self.store, b.wo[i]);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let a = attend(g, q, k, v, 1, scale);
            let o = g.matmul(a.out, wo);
            mixed = Some(match mixed {
                None => o,
                Some(acc) => g.add(acc, o),
            });
        }
        let x = g.add(x, mixed.expect("at least one head"));

        let h = self.norm(g, x, b.ln2_gain, b.ln2_bias);
        let w1 = g.param(self.store, b.ff1);
        let b1 = g.param(self.store, b.ff1_bias);
        let w2 = g.param(self.store, b.ff2);
        let b2 = g.param(self.store, b.ff2_bias);
        let f = g.matmul(h, w1);
        let f = g.add_row(f, b1);
        let f = g.gelu(f);
        let f = g.matmul(f, w2);
        let f = g.add_row(f, b2);
        g.add(x, f)
    }

    /// Positional encodings followed by the transformer blocks.
    pub fn temporal_transformer(&self, g: &mut Graph, frames: Var) -> Var {
        let pos = g.param(self.store, self.params.positions);
        let mut x = g.add(frames, pos);
        for b in &self.params.blocks {
            x = self.block(g, x, b);
        }
        x
    }

    /// pool -> fuse -> inject -> transformer. With `attrs = None` the
    /// knowledge steps are skipped.
    pub fn forward(&self, g: &mut Graph, frames: Var, attrs: Option<Var>) -> TkcOutput {
        match attrs {
            Some(q) => {
                let global = self.pool_temporal_attributes(g, q);
                let fused = self.fuse_global(g, frames, global);
                let (h, w) = self.inject_temporal_attributes(g, fused, q);
                TkcOutput {
                    frames: self.temporal_transformer(g, h),
                    attention: Some(w),
                }
            }
            None => TkcOutput {
                frames: self.temporal_transformer(g, frames),
                attention: None,
            },
        }
    }

    pub fn forward_values(
        &self,
        frames: &Array2<f64>,
        attrs: Option<&Array2<f64>>,
    ) -> FramePrototypes {
        let mut g = Graph::new();
        let f = g.constant(frames.clone());
        let q = attrs.map(|a| g.constant(a.clone()));
        let out = self.forward(&mut g, f, q);
        FramePrototypes(g.value(out.frames).clone())
    }
}
