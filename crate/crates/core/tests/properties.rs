mod common;

use ndarray::{Array3, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use dist_core::autograd::Graph;
use dist_core::data::{sample_indices, SamplingMode, SamplingPolicy};
use dist_core::encoders::{build_encoders, EncoderConfig, Frame, VideoClip};
use dist_core::metrics::{cosine_distance, fuse, mean_hausdorff, spatial_metric};
use dist_core::params::ParamStore;
use dist_core::skc::{Skc, SkcConfig, SkcParams};
use dist_core::tkc::{Tkc, TkcConfig, TkcParams};

fn skc_setup(seed: u64, n: usize, c: usize, heads: usize) -> (ParamStore, SkcParams, SkcConfig) {
    let cfg = SkcConfig {
        num_prototypes: n,
        heads,
        prototype_init_std: 0.5,
        ..SkcConfig::default()
    };
    let mut store = ParamStore::new();
    let params = SkcParams::init(&mut store, &cfg, c, &mut rng(seed));
    (store, params, cfg)
}

fn tkc_setup(seed: u64, t: usize, c: usize) -> (ParamStore, TkcParams, TkcConfig) {
    let cfg = TkcConfig::default();
    let mut store = ParamStore::new();
    let params = TkcParams::init(&mut store, &cfg, t, c, &mut rng(seed));
    (store, params, cfg)
}

fn row_sums_are_one(m: &Mat) -> bool {
    m.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6)
}

fn permute_frames(x: &Array3<f64>, perm: &[usize]) -> Array3<f64> {
    let mut out = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst)
            .assign(&x.index_axis(Axis(0), src));
    }
    out
}

fn permute_rows(x: &Mat, perm: &[usize]) -> Mat {
    let mut out = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&x.row(src));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn skc_attention_rows_sum_to_one(seed in any::<u64>(), n in 1usize..5, p in 1usize..6, g in 1usize..7) {
        let (store, params, cfg) = skc_setup(seed, n, 8, 1 + (seed % 2) as usize);
        let skc = Skc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 1);
        let mut graph = Graph::new();
        let p0 = graph.param(&store, params.prototypes);
        let (selfed, w_self) = skc.prototype_self_attention(&mut graph, p0);
        let x = graph.constant(rand_mat(&mut r, p, 8));
        let (agg, w_patch) = skc.patch_aggregate(&mut graph, selfed, x);
        let q = graph.constant(rand_mat(&mut r, g, 8));
        let (_, w_attr) = skc.inject_spatial_attributes(&mut graph, agg, q);
        for w in [w_self, w_patch, w_attr] {
            prop_assert!(row_sums_are_one(graph.value(w)));
        }
    }

    #[test]
    fn tkc_attention_rows_sum_to_one(seed in any::<u64>(), t in 1usize..9, l in 1usize..5) {
        let (store, params, cfg) = tkc_setup(seed, t, 8);
        let tkc = Tkc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 2);
        let mut g = Graph::new();
        let f = g.constant(rand_mat(&mut r, t, 8));
        let q = g.constant(rand_mat(&mut r, l, 8));
        let out = tkc.forward(&mut g, f, Some(q));
        let w = g.value(out.attention.unwrap());
        prop_assert_eq!(w.dim(), (t, l));
        prop_assert!(row_sums_are_one(w));
    }

    #[test]
    fn zeroed_value_projections_give_self_attended_prototypes(seed in any::<u64>(), t in 1usize..5, n in 1usize..4) {
        let (mut store, params, cfg) = skc_setup(seed, n, 8, 1);
        store.get_mut(params.patch_v).fill(0.0);
        store.get_mut(params.attr_v).fill(0.0);
        let skc = Skc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 3);
        let patches = rand_tensor(&mut r, (t, 4, 8));
        let attrs = rand_mat(&mut r, 6, 8);
        let out = skc.forward_values(&patches, Some(&attrs));
        let mut g = Graph::new();
        let p0 = g.param(&store, params.prototypes);
        let (selfed, _) = skc.prototype_self_attention(&mut g, p0);
        for k in 0..t {
            prop_assert_eq!(out.0.index_axis(Axis(0), k), g.value(selfed).view());
        }
    }

    #[test]
    fn skc_is_frame_equivariant(seed in any::<u64>(), t in 1usize..6) {
        let (store, params, cfg) = skc_setup(seed, 3, 8, 2);
        let skc = Skc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 4);
        let patches = rand_tensor(&mut r, (t, 4, 8));
        let attrs = rand_mat(&mut r, 6, 8);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let a = skc.forward_values(&permute_frames(&patches, &perm), Some(&attrs)).0;
        let b = permute_frames(&skc.forward_values(&patches, Some(&attrs)).0, &perm);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn global_fusion_is_additive(seed in any::<u64>(), t in 1usize..6) {
        let (store, params, cfg) = tkc_setup(seed, t, 8);
        let tkc = Tkc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 5);
        let mut g = Graph::new();
        let f = g.constant(rand_mat(&mut r, t, 8));
        let a = g.constant(rand_mat(&mut r, 1, 8));
        let b = g.constant(rand_mat(&mut r, 1, 8));
        let ab = g.add(a, b);
        let once = tkc.fuse_global(&mut g, f, ab);
        let fa = tkc.fuse_global(&mut g, f, a);
        let twice = tkc.fuse_global(&mut g, fa, b);
        prop_assert!(max_abs_diff(g.value(once), g.value(twice)) < 1e-12);
    }

    #[test]
    fn tkc_without_positions_is_frame_equivariant(seed in any::<u64>(), t in 2usize..6) {
        let (mut store, params, cfg) = tkc_setup(seed, t, 8);
        store.get_mut(params.positions).fill(0.0);
        let tkc = Tkc { cfg: &cfg, params: &params, store: &store };
        let mut r = rng(seed ^ 6);
        let frames = rand_mat(&mut r, t, 8);
        let attrs = rand_mat(&mut r, 3, 8);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let a = tkc.forward_values(&permute_rows(&frames, &perm), Some(&attrs)).0;
        let b = permute_rows(&tkc.forward_values(&frames, Some(&attrs)).0, &perm);
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn mean_hausdorff_symmetric_zero_on_self_and_bounded(seed in any::<u64>(), na in 1usize..6, nb in 1usize..6, c in 1usize..9) {
        let mut r = rng(seed);
        let a = rand_mat(&mut r, na, c);
        let b = rand_mat(&mut r, nb, c);
        let ab = mean_hausdorff(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, mean_hausdorff(b.view(), a.view()).unwrap());
        prop_assert!(mean_hausdorff(a.view(), a.view()).unwrap().abs() < 1e-12);
        prop_assert!((0.0..=4.0).contains(&ab));
    }

    #[test]
    fn cosine_distance_in_range(seed in any::<u64>(), c in 1usize..9) {
        let mut r = rng(seed);
        let u = rand_mat(&mut r, 1, c);
        let v = rand_mat(&mut r, 1, c);
        let d = cosine_distance(u.row(0), v.row(0)).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn spatial_metric_permutation_invariant(seed in any::<u64>(), tq in 1usize..5, ts in 1usize..5, n in 1usize..4) {
        let mut r = rng(seed);
        let q = rand_tensor(&mut r, (tq, n, 6));
        let s = rand_tensor(&mut r, (ts, n, 6));
        let base = spatial_metric(q.view(), s.view()).unwrap();
        let mut pq: Vec<usize> = (0..tq).collect();
        pq.shuffle(&mut r);
        let mut ps: Vec<usize> = (0..ts).collect();
        ps.shuffle(&mut r);
        let frames = spatial_metric(permute_frames(&q, &pq).view(), permute_frames(&s, &ps).view()).unwrap();
        prop_assert!((base - frames).abs() < 1e-12);
        let mut within = q.clone();
        for k in 0..tq {
            let mut pn: Vec<usize> = (0..n).collect();
            pn.shuffle(&mut r);
            let frame = q.index_axis(Axis(0), k).to_owned();
            within.index_axis_mut(Axis(0), k).assign(&permute_rows(&frame, &pn));
        }
        let protos = spatial_metric(within.view(), s.view()).unwrap();
        prop_assert!((base - protos).abs() < 1e-12);
    }

    #[test]
    fn fuse_linear_and_monotone(t in -5.0f64..5.0, s in -5.0f64..5.0, alpha in 0.01f64..3.0, eps in 1e-3f64..1.0) {
        prop_assert_eq!(fuse(t, s, 0.0), t);
        prop_assert!((fuse(t, s, alpha) - (t + alpha * s)).abs() < 1e-12);
        prop_assert!(fuse(t + eps, s, alpha) > fuse(t, s, alpha));
        prop_assert!(fuse(t, s + eps, alpha) > fuse(t, s, alpha));
    }

    #[test]
    fn zero_alpha_argmin_is_temporal_argmin(seed in any::<u64>(), m in 2usize..8) {
        let mut r = rng(seed);
        let temporal: Vec<f64> = (0..m).map(|_| r.random_range(0.0..2.0)).collect();
        let spatial: Vec<f64> = (0..m).map(|_| r.random_range(0.0..2.0)).collect();
        let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let fused: Vec<f64> = temporal.iter().zip(&spatial).map(|(&t, &s)| fuse(t, s, 0.0)).collect();
        prop_assert_eq!(argmin(&fused), argmin(&temporal));
    }

    #[test]
    fn sampled_indices_ordered_and_in_range(len in 1usize..200, frames in 1usize..12, seed in any::<u64>(), train in any::<bool>()) {
        let policy = SamplingPolicy {
            frames,
            mode: if train { SamplingMode::TrainRandomPerSegment } else { SamplingMode::EvalCenterPerSegment },
        };
        let idx = sample_indices(len, &policy, &mut rng(seed)).unwrap();
        prop_assert_eq!(idx.len(), frames);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
    }
}

fn random_clip(seed: u64, t: usize, size: usize) -> VideoClip {
    let mut r = rng(seed);
    let frames = (0..t)
        .map(|_| {
            let mut f = Frame::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    for ch in 0..3 {
                        f.set(y, x, ch, r.random());
                    }
                }
            }
            f
        })
        .collect();
    VideoClip {
        frames,
        class_id: 0,
        source_id: "p".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stub_encoder_shapes_and_purity(seed in any::<u64>(), t in 1usize..5, dim in 4usize..24) {
        let cfg = EncoderConfig { frames: t, dim, patches: 4, image_size: 16, ..EncoderConfig::default() };
        let (visual, _) = build_encoders(&cfg).unwrap();
        let clip = random_clip(seed, t, 16);
        let (f, x) = visual.encode_video(&clip).unwrap();
        prop_assert_eq!(f.0.dim(), (t, dim));
        prop_assert_eq!(x.0.dim(), (t, 4, dim));
        let (f2, x2) = visual.encode_video(&clip).unwrap();
        prop_assert_eq!(f.0, f2.0);
        prop_assert_eq!(x.0, x2.0);
    }
}
