//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

use common::grad::{episode_case, otam_case, skc_case, spatial_case, tkc_case};
use common::*;
use dist_core::autograd::Graph;
use dist_core::config::RunConfig;
use dist_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use dist_core::encoders::build_encoders;
use dist_core::episodic::{
    evaluate, train, ClipLoader, EpisodeScorer, EvalContext, EvalReport, EvalSettings,
    FrameMeanScorer, KnowledgeFeatures, ModelScorer,
};
use dist_core::knowledge::{
    build_spatial_prompt, build_temporal_prompt, KnowledgeBase, KnowledgeBuilder,
};
use dist_core::metrics::{
    bi_mhm_temporal, fuse, match_episode, mean_hausdorff, otam, spatial_metric, MetricConfig,
    SmoothMinConfig, TemporalMetric,
};
use dist_core::model::DistModel;
use dist_core::params::ParamStore;
use dist_core::skc::{Skc, SkcConfig, SkcParams};
use dist_core::tkc::{Tkc, TkcConfig, TkcParams};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {elapsed:.1?}, limit {limit:?}"),
    )
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c = r.random_range(1..=8);
        let (na, nb) = (r.random_range(1..=5), r.random_range(1..=5));
        let a = rand_mat(&mut r, na, c);
        let b = rand_mat(&mut r, nb, c);
        worst = worst
            .max((mean_hausdorff(a.view(), b.view()).unwrap() - mean_hausdorff_loop(&a, &b)).abs());
    }
    for _ in 0..200 {
        let (c, n) = (r.random_range(1..=8), r.random_range(1..=3));
        let (tq, ts) = (r.random_range(1..=4), r.random_range(1..=4));
        let q = rand_tensor(&mut r, (tq, n, c));
        let s = rand_tensor(&mut r, (ts, n, c));
        worst =
            worst.max((spatial_metric(q.view(), s.view()).unwrap() - spatial_loop(&q, &s)).abs());
    }
    for _ in 0..200 {
        let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=6));
        let d = rand_mat(&mut r, rows, cols);
        worst = worst.max((bi_mhm_temporal(d.view()) - bidirectional_min_loop(&d)).abs());
    }
    for i in 0..200 {
        let (t, n, c, m) = (
            r.random_range(1..=4),
            r.random_range(1..=3),
            r.random_range(2..=8),
            r.random_range(2..=5),
        );
        let cfg = MetricConfig {
            temporal: if i % 2 == 0 {
                TemporalMetric::Otam
            } else {
                TemporalMetric::BiMhm
            },
            smooth: if i % 4 == 0 {
                SmoothMinConfig::hard()
            } else {
                SmoothMinConfig::smooth(0.1)
            },
            alpha: r.random_range(0.0..2.0),
            temperature: r.random_range(0.1..2.0),
            ..MetricConfig::default()
        };
        let support: Vec<_> = (0..m).map(|_| random_prototypes(&mut r, t, n, c)).collect();
        let nq = r.random_range(1..=3);
        let queries: Vec<Vec<_>> = (0..nq)
            .map(|_| (0..m).map(|_| random_prototypes(&mut r, t, n, c)).collect())
            .collect();
        let got = match_episode(&queries, &support, &cfg).unwrap();
        worst = worst.max(max_abs_diff(
            &got,
            &match_episode_loop(&queries, &support, &cfg),
        ));
    }
    ensure(worst < 1e-9, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("4x200 instances, max deviation {worst:.1e}"))
}

fn otam_exactness() -> Outcome {
    let mut r = rng(102);
    let (mut hard_gap, mut smooth_gap, mut limit_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for size in 2..=4 {
        for _ in 0..100 {
            let d = Mat::from_shape_simple_fn((size, size), || r.random_range(0.0..2.0));
            let hard = otam(d.view(), SmoothMinConfig::hard()).unwrap();
            hard_gap = hard_gap.max((hard - otam_paths(&d, None)).abs());
            let lambda = r.random_range(0.01..1.0);
            let smooth = otam(d.view(), SmoothMinConfig::smooth(lambda)).unwrap();
            smooth_gap = smooth_gap.max((smooth - otam_paths(&d, Some(lambda))).abs());
            let sharp = otam(d.view(), SmoothMinConfig::smooth(1e-3)).unwrap();
            limit_gap = limit_gap.max((sharp - hard).abs());
        }
    }
    ensure(
        hard_gap == 0.0,
        format!("hard differs from path minimum by {hard_gap:e}"),
    )?;
    ensure(
        smooth_gap < 1e-8,
        format!("smooth differs from path log-sum-exp by {smooth_gap:e}"),
    )?;
    ensure(
        limit_gap <= 1e-3,
        format!("lambda=1e-3 differs from hard by {limit_gap:e}"),
    )?;
    Ok(format!(
        "hard exact, smooth {smooth_gap:.1e}, lambda=1e-3 {limit_gap:.1e}"
    ))
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut report = Vec::new();
    let mut check = |name: &str, worst: f64| {
        report.push(format!("{name} {worst:.1e}"));
        ensure(worst < TOL, format!("{name}: relative error {worst:e}"))
    };
    check("skc", (0..6).map(skc_case).fold(0.0, f64::max))?;
    check("tkc", (0..6).map(tkc_case).fold(0.0, f64::max))?;
    check("otam", (0..50).map(otam_case).fold(0.0, f64::max))?;
    let spatial: Vec<(f64, f64)> = (0..30).map(spatial_case).collect();
    check("spatial", spatial.iter().map(|p| p.0).fold(0.0, f64::max))?;
    let value_gap = spatial.iter().map(|p| p.1).fold(0.0, f64::max);
    ensure(
        value_gap < 1e-12,
        format!("graph spatial metric off by {value_gap:e}"),
    )?;
    check("episode", (0..4).map(episode_case).fold(0.0, f64::max))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(report.join(", "))
}

fn row_sums_ok(m: &Mat) -> bool {
    m.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6)
}

fn structural_invariants() -> Outcome {
    let mut r = rng(103);
    for seed in 0..50u64 {
        let (t, n, c) = (r.random_range(1..=5), r.random_range(1..=4), 8);
        let cfg = SkcConfig {
            num_prototypes: n,
            heads: 1 + (seed % 2) as usize,
            prototype_init_std: 0.5,
            ..SkcConfig::default()
        };
        let mut store = ParamStore::new();
        let params = SkcParams::init(&mut store, &cfg, c, &mut r);
        let patches = rand_tensor(&mut r, (t, 4, c));
        let attrs = rand_mat(&mut r, 6, c);
        {
            let skc = Skc {
                cfg: &cfg,
                params: &params,
                store: &store,
            };
            let mut g = Graph::new();
            let p0 = g.param(&store, params.prototypes);
            let (selfed, w_self) = skc.prototype_self_attention(&mut g, p0);
            let x = g.constant(patches.index_axis(Axis(0), 0).to_owned());
            let (agg, w_patch) = skc.patch_aggregate(&mut g, selfed, x);
            let q = g.constant(attrs.clone());
            let (_, w_attr) = skc.inject_spatial_attributes(&mut g, agg, q);
            for w in [w_self, w_patch, w_attr] {
                ensure(
                    row_sums_ok(g.value(w)),
                    "spatial attention rows do not sum to 1",
                )?;
            }
        }
        store.get_mut(params.patch_v).fill(0.0);
        store.get_mut(params.attr_v).fill(0.0);
        let skc = Skc {
            cfg: &cfg,
            params: &params,
            store: &store,
        };
        let out = skc.forward_values(&patches, Some(&attrs)).0;
        let mut g = Graph::new();
        let p0 = g.param(&store, params.prototypes);
        let (selfed, _) = skc.prototype_self_attention(&mut g, p0);
        for k in 0..t {
            ensure(
                out.index_axis(Axis(0), k) == g.value(selfed).view(),
                "zeroed value projections changed the prototypes",
            )?;
        }

        let tcfg = TkcConfig::default();
        let mut tstore = ParamStore::new();
        let tparams = TkcParams::init(&mut tstore, &tcfg, t, c, &mut r);
        let tkc = Tkc {
            cfg: &tcfg,
            params: &tparams,
            store: &tstore,
        };
        let mut g = Graph::new();
        let f = g.constant(rand_mat(&mut r, t, c));
        let q = g.constant(rand_mat(&mut r, 3, c));
        let out = tkc.forward(&mut g, f, Some(q));
        ensure(
            row_sums_ok(g.value(out.attention.unwrap())),
            "temporal attention rows do not sum to 1",
        )?;

        let (tq, ts) = (r.random_range(1..=4), r.random_range(1..=4));
        let q = rand_tensor(&mut r, (tq, n, 6));
        let s = rand_tensor(&mut r, (ts, n, 6));
        let base = spatial_metric(q.view(), s.view()).unwrap();
        let mut order: Vec<usize> = (0..tq).collect();
        order.shuffle(&mut r);
        let shuffled = q.select(Axis(0), &order);
        ensure(
            (spatial_metric(shuffled.view(), s.view()).unwrap() - base).abs() < 1e-12,
            "spatial metric depends on frame order",
        )?;
        let mut protos: Vec<usize> = (0..n).collect();
        protos.shuffle(&mut r);
        let within_frames = q.select(Axis(1), &protos);
        ensure(
            (spatial_metric(within_frames.view(), s.view()).unwrap() - base).abs() < 1e-12,
            "spatial metric depends on prototype order",
        )?;

        let a = q.index_axis(Axis(0), 0).to_owned();
        let b = s.index_axis(Axis(0), 0).to_owned();
        ensure(
            mean_hausdorff(a.view(), b.view()).unwrap()
                == mean_hausdorff(b.view(), a.view()).unwrap(),
            "mean Hausdorff is not symmetric",
        )?;
        ensure(
            mean_hausdorff(a.view(), a.view()).unwrap().abs() < 1e-12,
            "self distance is not zero",
        )?;

        let (dt, ds) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        ensure(
            fuse(dt, ds, 0.0) == dt,
            "fuse with alpha=0 is not the temporal distance",
        )?;
    }
    Ok("50 random cases".into())
}

fn prompt_fidelity() -> Outcome {
    let spatial = build_spatial_prompt("drink", 6);
    let temporal = build_temporal_prompt("drink", 3);
    ensure(
        spatial == "Given action label {drink}, please generate {6} most related objects for each class.",
        format!("spatial prompt {spatial:?}"),
    )?;
    ensure(
        temporal == "Given action label {drink}, please describe {3} states of each action in simple and short words.",
        format!("temporal prompt {temporal:?}"),
    )?;
    Ok("both templates byte-identical".into())
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Setup {
    cfg: RunConfig,
    dataset: Dataset,
    kb: KnowledgeBase,
}

fn shipped_setup() -> Setup {
    let cfg = RunConfig::load(&configs_dir().join("synthetic_quick.json")).unwrap();
    let spec: SyntheticSpec = serde_json::from_str(
        &std::fs::read_to_string(configs_dir().join("synthetic_spec.json")).unwrap(),
    )
    .unwrap();
    let syn = generate_synthetic(&spec, 0).unwrap();
    let (kb, _) = KnowledgeBuilder::new(&syn.fixture, cfg.model.knowledge.g, cfg.model.knowledge.l)
        .build(&syn.labels(), None)
        .unwrap();
    Setup {
        cfg,
        dataset: Dataset::from_manifest(syn.manifest).unwrap(),
        kb,
    }
}

fn run_eval(
    cfg: &RunConfig,
    dataset: &Dataset,
    kb: &KnowledgeBase,
    model: Option<&DistModel>,
) -> EvalReport {
    let (visual, text) = build_encoders(&cfg.model.encoder).unwrap();
    let ctx = EvalContext {
        dataset,
        loader: ClipLoader {
            dataset,
            encoder: visual.as_ref(),
            frames: cfg.model.encoder.frames,
            augment: cfg.train.augment.then_some(&cfg.augment),
        },
        config_fingerprint: cfg.model.fingerprint(),
    };
    let mut settings = EvalSettings::from_config(cfg, "test");
    settings.workers = 1;
    match model {
        Some(model) => {
            let classes = &dataset.split("test").unwrap().classes;
            let knowledge =
                KnowledgeFeatures::encode(kb, classes, &cfg.model.knowledge, text.as_ref())
                    .unwrap();
            let scorer = ModelScorer {
                model,
                knowledge: &knowledge,
                shot_agg: cfg.episode.shot_agg,
            };
            evaluate(&scorer, &ctx, &settings).unwrap()
        }
        None => evaluate(&FrameMeanScorer as &dyn EpisodeScorer, &ctx, &settings).unwrap(),
    }
}

fn train_and_eval(setup: &Setup, cfg: &RunConfig) -> (String, EvalReport) {
    let out = train(cfg, &setup.dataset, &setup.kb, &mut |_, _| {}).unwrap();
    let report = run_eval(cfg, &setup.dataset, &setup.kb, Some(&out.model));
    (serde_json::to_string(&out.log).unwrap(), report)
}

fn learning_signal(setup: &Setup) -> (Outcome, f64) {
    let start = Instant::now();
    let (_, model) = train_and_eval(setup, &setup.cfg);
    let elapsed = start.elapsed();
    let base = run_eval(&setup.cfg, &setup.dataset, &setup.kb, None);
    let detail = format!(
        "model {:.3} ± {:.3}, frame-mean {:.3} ± {:.3}, {} episodes, {elapsed:.0?}",
        model.mean_accuracy, model.ci95, base.mean_accuracy, base.ci95, model.n_episodes
    );
    let check = || -> Result<(), String> {
        ensure(model.n_episodes == 500, "expected 500 test episodes")?;
        ensure(model.mean_accuracy >= 0.60, "accuracy below 0.60")?;
        ensure(
            model.mean_accuracy >= base.mean_accuracy + 0.10,
            "less than 10 points above frame-mean",
        )?;
        ensure(
            model.mean_accuracy - model.ci95 > 0.2,
            "confidence interval reaches chance",
        )?;
        within(elapsed, Duration::from_secs(15 * 60))
    };
    let outcome = check()
        .map(|_| detail.clone())
        .map_err(|e| format!("{e}: {detail}"));
    (outcome, model.mean_accuracy)
}

fn ablation_direction(setup: &Setup, half: f64) -> Outcome {
    let accuracy = |alpha: f64| {
        let mut cfg = setup.cfg.clone();
        cfg.model.metric.alpha = alpha;
        train_and_eval(setup, &cfg).1.mean_accuracy
    };
    let (zero, one) = (accuracy(0.0), accuracy(1.0));
    let detail = format!("alpha=0 {zero:.3}, alpha=0.5 {half:.3}, alpha=1 {one:.3}");
    ensure(half >= zero.max(one) - 0.01, detail.clone())?;
    Ok(detail)
}

fn determinism(setup: &Setup) -> Outcome {
    let mut cfg = setup.cfg.clone();
    cfg.train.episodes_per_epoch = 60;
    cfg.eval.episodes = 60;
    let run = || {
        let (log, report) = train_and_eval(setup, &cfg);
        (log, serde_json::to_string_pretty(&report).unwrap())
    };
    let (a, b) = (run(), run());
    ensure(a.0 == b.0, "training logs differ")?;
    ensure(a.1 == b.1, "eval reports differ")?;
    Ok(format!(
        "{} + {} report bytes identical",
        a.0.len(),
        a.1.len()
    ))
}

#[test]
fn acceptance() {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name}: {detail}");
        }
    };
    report("metric-oracle equivalence", metric_oracles());
    report("otam exactness", otam_exactness());
    report("gradient suite", gradient_suite());
    report("structural invariants", structural_invariants());
    report("prompt fidelity", prompt_fidelity());
    let setup = shipped_setup();
    let (outcome, at_half) = learning_signal(&setup);
    report("learning signal", outcome);
    report("ablation direction", ablation_direction(&setup, at_half));
    report("determinism", determinism(&setup));
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}
