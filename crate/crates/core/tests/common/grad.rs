//! Finite-difference checks of the analytic gradients. Each case returns
//! the worst relative error over every checked entry.

use ndarray::{Array3, Axis};
use rand::Rng;

use dist_core::autograd::{Graph, Var};
use dist_core::config::{ModelConfig, ShotAggregation};
use dist_core::knowledge::AttributeFeatures;
use dist_core::metrics::{otam_with_grad, spatial_metric, DistanceKind, SmoothMinConfig};
use dist_core::model::{ClipFeatures, DistModel, EpisodeInputs};
use dist_core::params::ParamStore;
use dist_core::skc::{Skc, SkcConfig, SkcParams};
use dist_core::tkc::{Tkc, TkcConfig, TkcParams};

use super::{fd_worst, rand_mat, rand_tensor, rng, Mat};

/// Nonlinear scalar read-out so every output entry gets its own weight.
fn readout(g: &mut Graph, out: Var, r: &Mat) -> Var {
    let rv = g.constant(r.clone());
    let p = g.matmul(out, rv);
    let a = g.gelu(p);
    g.sum(a)
}

/// Checks d(loss)/d(param) for every parameter in `store`.
fn check_params(store: &ParamStore, loss: &dyn Fn(&ParamStore) -> (Graph, Var)) -> f64 {
    let (g, out) = loss(store);
    let grads = g.backward(out);
    let analytic: Vec<_> = grads
        .params()
        .into_iter()
        .map(|(id, m)| (id, m.clone()))
        .collect();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let zero = Mat::zeros(store.get(id).raw_dim());
        let a = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, m)| m)
            .unwrap_or(&zero);
        let mut f = |x: &Mat| {
            let mut s = store.clone();
            s.get_mut(id).assign(x);
            let (g, out) = loss(&s);
            g.scalar(out)
        };
        worst = worst.max(fd_worst(&mut f, store.get(id), a));
    }
    worst
}

pub fn skc_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, n, c, p, gq) = (
        r.random_range(1..=4),
        r.random_range(1..=3),
        8,
        r.random_range(2..=4),
        3,
    );
    let cfg = SkcConfig {
        num_prototypes: n,
        heads: if seed.is_multiple_of(2) { 1 } else { 2 },
        prototype_init_std: 0.5,
        ..SkcConfig::default()
    };
    let mut store = ParamStore::new();
    let params = SkcParams::init(&mut store, &cfg, c, &mut r);
    let patches = rand_tensor(&mut r, (t, p, c));
    let attrs = rand_mat(&mut r, gq, c);
    let out_w = rand_mat(&mut r, c, 3);

    let build = |store: &ParamStore, patches: &Array3<f64>, attrs: &Mat| {
        let skc = Skc {
            cfg: &cfg,
            params: &params,
            store,
        };
        let mut g = Graph::new();
        let frames: Vec<Var> = patches
            .axis_iter(Axis(0))
            .map(|x| g.constant(x.to_owned()))
            .collect();
        let q = g.constant(attrs.clone());
        let out = skc.forward(&mut g, &frames, Some(q));
        let loss = readout(&mut g, out, &out_w);
        (g, loss, frames, q)
    };

    let mut worst = check_params(&store, &|s| {
        let (g, loss, _, _) = build(s, &patches, &attrs);
        (g, loss)
    });
    let (g, loss, frames, q) = build(&store, &patches, &attrs);
    let grads = g.backward(loss);
    worst = worst.max(fd_worst(
        &mut |x| {
            let (g, l, _, _) = build(&store, &patches, x);
            g.scalar(l)
        },
        &attrs,
        grads.of(q).expect("attribute gradient"),
    ));
    for (k, &fv) in frames.iter().enumerate() {
        let frame = patches.index_axis(Axis(0), k).to_owned();
        worst = worst.max(fd_worst(
            &mut |x| {
                let mut p2 = patches.clone();
                p2.index_axis_mut(Axis(0), k).assign(x);
                let (g, l, _, _) = build(&store, &p2, &attrs);
                g.scalar(l)
            },
            &frame,
            grads.of(fv).expect("patch gradient"),
        ));
    }
    worst
}

pub fn tkc_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, c, l) = (r.random_range(1..=4), 8, r.random_range(1..=3));
    let cfg = TkcConfig {
        heads: 2,
        ..TkcConfig::default()
    };
    let mut store = ParamStore::new();
    let params = TkcParams::init(&mut store, &cfg, t, c, &mut r);
    let frames = rand_mat(&mut r, t, c);
    let attrs = rand_mat(&mut r, l, c);
    let out_w = rand_mat(&mut r, c, 3);

    let build = |store: &ParamStore, frames: &Mat, attrs: &Mat| {
        let tkc = Tkc {
            cfg: &cfg,
            params: &params,
            store,
        };
        let mut g = Graph::new();
        let f = g.constant(frames.clone());
        let q = g.constant(attrs.clone());
        let out = tkc.forward(&mut g, f, Some(q));
        let loss = readout(&mut g, out.frames, &out_w);
        (g, loss, f, q)
    };

    let mut worst = check_params(&store, &|s| {
        let (g, loss, _, _) = build(s, &frames, &attrs);
        (g, loss)
    });
    let (g, loss, f, q) = build(&store, &frames, &attrs);
    let grads = g.backward(loss);
    worst = worst.max(fd_worst(
        &mut |x| {
            let (g, l, _, _) = build(&store, x, &attrs);
            g.scalar(l)
        },
        &frames,
        grads.of(f).expect("frame gradient"),
    ));
    worst.max(fd_worst(
        &mut |x| {
            let (g, l, _, _) = build(&store, &frames, x);
            g.scalar(l)
        },
        &attrs,
        grads.of(q).expect("attribute gradient"),
    ))
}

pub fn otam_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = Mat::from_shape_simple_fn((r.random_range(1..=4), r.random_range(1..=4)), || {
        r.random_range(0.0..2.0)
    });
    let cfg = SmoothMinConfig::smooth(r.random_range(0.05..1.0));
    let (_, analytic) = otam_with_grad(d.view(), cfg).unwrap();
    fd_worst(
        &mut |x| otam_with_grad(x.view(), cfg).unwrap().0,
        &d,
        &analytic,
    )
}

/// The spatial metric as the model differentiates it: pairwise cosine
/// distances between flattened prototypes, block Hausdorff, then the
/// bidirectional minimum. Also returns its difference to the array version.
pub fn spatial_case(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (tq, ts, n, c) = (
        r.random_range(1..=4),
        r.random_range(1..=4),
        r.random_range(1..=3),
        r.random_range(2..=8),
    );
    let q = rand_mat(&mut r, tq * n, c);
    let s = rand_mat(&mut r, ts * n, c);
    let build = |q: &Mat, s: &Mat| {
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let sv = g.constant(s.clone());
        let flat = g.pairwise_distance(qv, sv, DistanceKind::Cosine);
        let d = g.block_hausdorff(flat, (tq, n), (ts, n), true);
        let out = g.bidirectional_min(d);
        (g, out, qv, sv)
    };
    let (g, out, qv, sv) = build(&q, &s);
    let reference = spatial_metric(
        q.clone().into_shape_with_order((tq, n, c)).unwrap().view(),
        s.clone().into_shape_with_order((ts, n, c)).unwrap().view(),
    )
    .unwrap();
    let value_gap = (g.scalar(out) - reference).abs();
    let grads = g.backward(out);
    let wq = fd_worst(
        &mut |x| {
            let (g, o, _, _) = build(x, &s);
            g.scalar(o)
        },
        &q,
        grads.of(qv).unwrap(),
    );
    let ws = fd_worst(
        &mut |x| {
            let (g, o, _, _) = build(&q, x);
            g.scalar(o)
        },
        &s,
        grads.of(sv).unwrap(),
    );
    (wq.max(ws), value_gap)
}

fn clip(r: &mut impl Rng, t: usize, p: usize, c: usize) -> ClipFeatures {
    ClipFeatures {
        frames: rand_mat(r, t, c),
        patches: rand_tensor(r, (t, p, c)),
    }
}

/// Cross-entropy of a small full episode w.r.t. every model parameter.
pub fn episode_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut cfg = ModelConfig::default();
    cfg.encoder.dim = 8;
    cfg.encoder.frames = r.random_range(2..=4);
    cfg.encoder.patches = 3;
    cfg.encoder.visual_trainable = seed % 2 == 1;
    cfg.skc.num_prototypes = r.random_range(1..=3);
    cfg.skc.prototype_init_std = 0.5;
    cfg.knowledge.g = 3;
    cfg.knowledge.l = 2;
    cfg.metric.temperature = 0.5;
    cfg.init_seed = seed;
    let model = DistModel::new(cfg.clone()).unwrap();
    let (t, p, c) = (cfg.encoder.frames, cfg.encoder.patches, cfg.encoder.dim);
    let way = 3;
    let shot = 1 + (seed as usize % 2);
    let support: Vec<Vec<ClipFeatures>> = (0..way)
        .map(|_| (0..shot).map(|_| clip(&mut r, t, p, c)).collect())
        .collect();
    let queries: Vec<ClipFeatures> = (0..way).map(|_| clip(&mut r, t, p, c)).collect();
    let knowledge: Vec<AttributeFeatures> = (0..way)
        .map(|_| AttributeFeatures {
            spatial: rand_mat(&mut r, 3, c),
            temporal: rand_mat(&mut r, 2, c),
        })
        .collect();
    let labels: Vec<usize> = (0..way).collect();
    let agg = if seed.is_multiple_of(3) {
        ShotAggregation::MeanScores
    } else {
        ShotAggregation::MeanPrototypes
    };

    let loss = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        let inputs = EpisodeInputs {
            support: support.iter().map(|s| s.iter().collect()).collect(),
            queries: queries.iter().collect(),
            knowledge: knowledge.iter().collect(),
        };
        let mut g = Graph::new();
        let out = m.episode_graph(&mut g, &inputs, agg).unwrap();
        let l = g.cross_entropy(out.logits, &labels);
        (g, l)
    };
    check_params(&model.store, &loss)
}
