use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, Context};
use serde::Serialize;

use dist_core::config::RunConfig;
use dist_core::data::{generate_synthetic, save_manifest, Dataset, SyntheticSpec};
use dist_core::encoders::build_encoders;
use dist_core::episodic::{
    self, check_kb_compatible, dump_episode, evaluate, Checkpoint, ClipLoader, EpisodeScorer,
    EvalContext, EvalReport, EvalSettings, FrameMeanScorer, KnowledgeFeatures, ModelScorer,
    OracleScorer, RandomScorer,
};
use dist_core::knowledge::{
    load_kb, save_kb, AttributeRequest, FixtureClient, HttpClient, KnowledgeBase, KnowledgeBuilder,
    LlmClient,
};
use dist_core::metrics::TemporalMetric;
use dist_core::Result as CoreResult;

use crate::run::{load_dataset, usage, write_csv, Run, CHECKPOINT, CHECKPOINT_KB, REPORTS};
use crate::{DataArgs, ScorerKind, Sweep};

struct CountingClient<'a> {
    inner: &'a dyn LlmClient,
    calls: AtomicUsize,
}

impl LlmClient for CountingClient<'_> {
    fn complete(&self, request: &AttributeRequest<'_>) -> CoreResult<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_labels(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn knowledge_build(
    labels: &Path,
    g: usize,
    l: usize,
    out: &Path,
    fixture: Option<&Path>,
    max_inflight: usize,
) -> anyhow::Result<()> {
    if g == 0 || l == 0 {
        return Err(usage("--g and --l must be >= 1"));
    }
    let labels = read_labels(labels)?;
    if labels.is_empty() {
        return Err(usage("label file is empty"));
    }
    let inner: Box<dyn LlmClient> = match fixture {
        Some(p) => Box::new(FixtureClient::from_path(p)?),
        None => Box::new(HttpClient::from_env()?),
    };
    let client = CountingClient {
        inner: inner.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let file_name = out
        .file_name()
        .ok_or_else(|| usage("--out must name a file"))?;
    let mut run = Run::start(&parent_dir(out))?;
    run.config(&serde_json::json!({ "g": g, "l": l, "labels": labels.len(), "fixture": fixture }));

    let builder = KnowledgeBuilder::new(&client, g, l).max_inflight(max_inflight);
    let cached = if out.exists() {
        Some(load_kb(out, Some(&builder.fingerprint()), false)?)
    } else {
        None
    };
    let (kb, report) = builder.build(&labels, cached)?;
    run.lap("generate");
    save_kb(&kb, &run.artifact(file_name)?)?;
    run.hashes(Some(kb.content_hash()), None);
    log::info!(
        "{} generated, {} cached, {} failed; {} client calls",
        report.generated.len(),
        report.cached.len(),
        report.failed.len(),
        client.calls.load(Ordering::SeqCst)
    );
    run.finish()?;
    if !report.is_complete() {
        let lines: Vec<String> = report
            .failed
            .iter()
            .map(|(label, why)| format!("  {label}: {why}"))
            .collect();
        return Err(anyhow!(
            "knowledge base is missing {} of {} labels:\n{}",
            report.failed.len(),
            labels.len(),
            lines.join("\n")
        ));
    }
    Ok(())
}

pub fn synth(spec: Option<&Path>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| dist_core::Error::Schema {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?
        }
        None => SyntheticSpec::default(),
    };
    let mut run = Run::start(out)?;
    run.config(&spec);
    let syn = generate_synthetic(&spec, seed)?;
    save_manifest(&syn.manifest, &run.artifact("dataset.json")?)?;
    std::fs::write(run.artifact("labels.txt")?, syn.labels().join("\n") + "\n")?;
    std::fs::write(run.artifact("fixture.json")?, syn.fixture.to_json()?)?;
    run.hashes(None, Some(syn.manifest.content_hash()));
    run.lap("generate");
    log::info!(
        "{} classes written to {}",
        syn.labels().len(),
        out.display()
    );
    run.finish()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Trains and writes the checkpoint (with its KB) under `checkpoint_dir`,
/// relative to the run's output directory.
fn train_into(
    run: &mut Run,
    cfg: &RunConfig,
    kb: &KnowledgeBase,
    dataset: &Dataset,
    checkpoint_dir: &Path,
) -> anyhow::Result<episodic::TrainOutcome> {
    let outcome = episodic::train(cfg, dataset, kb, &mut |_, _| {})?;
    outcome
        .checkpoint
        .save(&run.out_dir().join(checkpoint_dir))?;
    for f in ["manifest.json", "params.bin"] {
        run.artifact(checkpoint_dir.join(f))?;
    }
    save_kb(kb, &run.artifact(checkpoint_dir.join(CHECKPOINT_KB))?)?;
    Ok(outcome)
}

fn window_accuracy(log: &[episodic::EpisodeLog]) -> f64 {
    log.iter().map(|e| e.accuracy).sum::<f64>() / log.len().max(1) as f64
}

pub fn train(config: Option<&Path>, kb: &Path, data: &DataArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let kb = load_kb(kb, None, false)?;
    let dataset = load_dataset(data)?;
    let mut run = Run::start(out)?;
    run.config(&cfg);
    run.hashes(
        Some(kb.content_hash()),
        Some(dataset.manifest.content_hash()),
    );
    run.lap("load");
    let outcome = train_into(&mut run, &cfg, &kb, &dataset, Path::new(CHECKPOINT))?;
    run.lap("train");
    write_csv(
        &run.artifact(Path::new(REPORTS).join("loss.csv"))?,
        &outcome.log,
    )?;
    let log = &outcome.log;
    let w = log.len().min(100);
    log::info!(
        "trained {} episodes; train accuracy first {w}: {:.3}, last {w}: {:.3}",
        log.len(),
        window_accuracy(&log[..w]),
        window_accuracy(&log[log.len() - w..])
    );
    run.finish()
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub data: DataArgs,
    pub kb: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub split: String,
    pub scorer: ScorerKind,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn checkpoint_kb(checkpoint: &Path, kb: Option<&Path>) -> anyhow::Result<KnowledgeBase> {
    let path = kb
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.join(CHECKPOINT_KB));
    Ok(load_kb(&path, None, false)?)
}

/// Evaluates `ck` with the chosen scorer on `dataset`.
fn evaluate_checkpoint(
    ck: &Checkpoint,
    kb: &KnowledgeBase,
    dataset: &Dataset,
    settings: &EvalSettings,
    scorer: ScorerKind,
) -> anyhow::Result<EvalReport> {
    let cfg = &ck.config;
    let (visual, text) = build_encoders(&cfg.model.encoder)?;
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
    let report = match scorer {
        ScorerKind::Model => {
            check_kb_compatible(ck, kb)?;
            let model = ck.model()?;
            let classes = &dataset.split(&settings.split)?.classes;
            let knowledge =
                KnowledgeFeatures::encode(kb, classes, &cfg.model.knowledge, text.as_ref())?;
            let s = ModelScorer {
                model: &model,
                knowledge: &knowledge,
                shot_agg: cfg.episode.shot_agg,
            };
            evaluate(&s, &ctx, settings)?
        }
        ScorerKind::Oracle => evaluate(&OracleScorer, &ctx, settings)?,
        ScorerKind::Random => evaluate(
            &RandomScorer {
                seed: settings.seed,
            },
            &ctx,
            settings,
        )?,
        ScorerKind::FrameMean => evaluate(&FrameMeanScorer as &dyn EpisodeScorer, &ctx, settings)?,
    };
    Ok(report)
}

pub fn eval(req: &EvalRequest) -> anyhow::Result<()> {
    if req.episodes == Some(0) {
        return Err(usage("--episodes must be >= 1"));
    }
    let ck = Checkpoint::load(&req.checkpoint)?;
    let kb = checkpoint_kb(&req.checkpoint, req.kb.as_deref())?;
    let dataset = load_dataset(&req.data)?;
    let out = req
        .out
        .clone()
        .unwrap_or_else(|| parent_dir(&req.checkpoint));
    let mut run = Run::start(&out)?;
    let mut settings = EvalSettings::from_config(&ck.config, &req.split);
    if let Some(n) = req.episodes {
        settings.episodes = n;
    }
    if let Some(s) = req.seed {
        settings.seed = s;
    }
    if let Some(w) = req.workers {
        settings.workers = w.max(1);
    }
    run.config(&settings);
    run.hashes(
        Some(kb.content_hash()),
        Some(dataset.manifest.content_hash()),
    );
    run.lap("load");
    let report = evaluate_checkpoint(&ck, &kb, &dataset, &settings, req.scorer)?;
    run.lap("eval");
    let name = format!("eval_{}_{}.json", report.scorer, report.split);
    std::fs::write(
        run.artifact(Path::new(REPORTS).join(name))?,
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} on {}: accuracy {:.4} ± {:.4} (95% CI, {} episodes)",
        report.scorer, report.split, report.mean_accuracy, report.ci95, report.n_episodes
    );
    run.finish()
}

pub struct AblateRequest {
    pub sweep: Sweep,
    pub values: Vec<String>,
    pub config: Option<PathBuf>,
    pub kb: String,
    pub data: DataArgs,
    pub episodes: Option<usize>,
    pub workers: Option<usize>,
    pub out: PathBuf,
}

fn sweep_name(sweep: Sweep) -> &'static str {
    match sweep {
        Sweep::Alpha => "alpha",
        Sweep::G => "G",
        Sweep::L => "L",
        Sweep::N => "N",
        Sweep::Metric => "metric",
    }
}

fn apply_sweep(cfg: &mut RunConfig, sweep: Sweep, value: &str) -> anyhow::Result<()> {
    let count = || {
        value
            .parse::<usize>()
            .with_context(|| format!("{value:?} is not a count"))
    };
    match sweep {
        Sweep::Alpha => {
            cfg.model.metric.alpha = value
                .parse()
                .with_context(|| format!("{value:?} is not a number"))?
        }
        Sweep::G => cfg.model.knowledge.g = count()?,
        Sweep::L => cfg.model.knowledge.l = count()?,
        Sweep::N => cfg.model.skc.num_prototypes = count()?,
        Sweep::Metric => {
            cfg.model.metric.temporal =
                serde_json::from_value::<TemporalMetric>(serde_json::Value::String(value.into()))
                    .map_err(|_| {
                        anyhow!("unknown temporal metric {value:?}; expected otam or bi_mhm")
                    })?
        }
    }
    cfg.validate()?;
    Ok(())
}

#[derive(Serialize)]
struct AblationRow<'a> {
    sweep: &'a str,
    value: &'a str,
    accuracy: Option<f64>,
    ci95: Option<f64>,
    episodes: Option<usize>,
    error: String,
}

pub fn ablate(req: &AblateRequest) -> anyhow::Result<()> {
    if req.episodes == Some(0) {
        return Err(usage("--episodes must be >= 1"));
    }
    let base = load_config(req.config.as_deref())?;
    let dataset = load_dataset(&req.data)?;
    let name = sweep_name(req.sweep);
    let mut run = Run::start(&req.out)?;
    run.config(&serde_json::json!({ "base": base, "sweep": name, "values": req.values }));
    run.hashes(None, Some(dataset.manifest.content_hash()));
    let mut rows = Vec::with_capacity(req.values.len());
    for value in &req.values {
        let cell = PathBuf::from("cells").join(format!("{name}_{value}"));
        let result = (|| -> anyhow::Result<EvalReport> {
            let mut cfg = base.clone();
            apply_sweep(&mut cfg, req.sweep, value)?;
            let kb = load_kb(Path::new(&req.kb.replace("{}", value)), None, false)?;
            let outcome = train_into(&mut run, &cfg, &kb, &dataset, &cell.join(CHECKPOINT))?;
            let mut settings = EvalSettings::from_config(&cfg, "test");
            if let Some(n) = req.episodes {
                settings.episodes = n;
            }
            if let Some(w) = req.workers {
                settings.workers = w.max(1);
            }
            evaluate_checkpoint(
                &outcome.checkpoint,
                &kb,
                &dataset,
                &settings,
                ScorerKind::Model,
            )
        })();
        run.lap(&format!("{name}={value}"));
        rows.push(match result {
            Ok(r) => {
                log::info!(
                    "{name}={value}: accuracy {:.4} ± {:.4}",
                    r.mean_accuracy,
                    r.ci95
                );
                AblationRow {
                    sweep: name,
                    value,
                    accuracy: Some(r.mean_accuracy),
                    ci95: Some(r.ci95),
                    episodes: Some(r.n_episodes),
                    error: String::new(),
                }
            }
            Err(e) => {
                log::warn!("{name}={value} failed: {e:#}");
                AblationRow {
                    sweep: name,
                    value,
                    accuracy: None,
                    ci95: None,
                    episodes: None,
                    error: format!("{e:#}"),
                }
            }
        });
    }
    let csv_path = run.artifact(Path::new(REPORTS).join(format!("ablate_{name}.csv")))?;
    write_csv(&csv_path, &rows)?;
    println!("wrote {}", csv_path.display());
    run.finish()
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    query: usize,
    clip: &'a str,
    label: &'a str,
    class: &'a str,
    d_spatial: f64,
    d_temporal: f64,
    alpha: f64,
    d_fused: f64,
    chosen: &'a str,
}

pub fn report(
    checkpoint: &Path,
    data: &DataArgs,
    kb: Option<&Path>,
    episode: usize,
    seed: Option<u64>,
    split: &str,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let kb = checkpoint_kb(checkpoint, kb)?;
    check_kb_compatible(&ck, &kb)?;
    let dataset = load_dataset(data)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| parent_dir(checkpoint));
    let mut run = Run::start(&out)?;
    let cfg = &ck.config;
    let mut settings = EvalSettings::from_config(cfg, split);
    if let Some(s) = seed {
        settings.seed = s;
    }
    run.config(&serde_json::json!({ "settings": settings, "episode": episode }));
    run.hashes(
        Some(kb.content_hash()),
        Some(dataset.manifest.content_hash()),
    );

    let (visual, text) = build_encoders(&cfg.model.encoder)?;
    let ctx = EvalContext {
        dataset: &dataset,
        loader: ClipLoader {
            dataset: &dataset,
            encoder: visual.as_ref(),
            frames: cfg.model.encoder.frames,
            augment: cfg.train.augment.then_some(&cfg.augment),
        },
        config_fingerprint: cfg.model.fingerprint(),
    };
    let model = ck.model()?;
    let classes = &dataset.split(split)?.classes;
    let knowledge = KnowledgeFeatures::encode(&kb, classes, &cfg.model.knowledge, text.as_ref())?;
    let dump = dump_episode(
        &model,
        &knowledge,
        &ctx,
        &settings,
        cfg.episode.shot_agg,
        episode,
    )?;
    run.lap("dump");

    let names = &dump.episode.classes;
    let mut rows = Vec::new();
    for (q, query) in dump.queries.iter().enumerate() {
        for (c, s) in query.scores.iter().enumerate() {
            rows.push(ScoreRow {
                query: q,
                clip: &query.clip,
                label: &names[query.label],
                class: &names[c],
                d_spatial: s.spatial,
                d_temporal: s.temporal,
                alpha: s.alpha,
                d_fused: s.fused,
                chosen: &names[query.chosen],
            });
        }
    }
    let reports = Path::new(REPORTS);
    write_csv(
        &run.artifact(reports.join(format!("episode_{episode}_scores.csv")))?,
        &rows,
    )?;

    let attn_path = run.artifact(reports.join(format!("episode_{episode}_attention.csv")))?;
    let mut w = csv::Writer::from_path(&attn_path)?;
    let l = cfg.model.knowledge.l;
    let mut header = vec!["query".to_string(), "class".into(), "frame".into()];
    header.extend((0..l).map(|k| format!("attribute_{k}")));
    w.write_record(&header)?;
    for (q, query) in dump.queries.iter().enumerate() {
        for (c, weights) in query.attention.iter().enumerate() {
            let Some(weights) = weights else { continue };
            for (t, row) in weights.outer_iter().enumerate() {
                let mut record = vec![q.to_string(), names[c].clone(), t.to_string()];
                record.extend(row.iter().map(f64::to_string));
                w.write_record(&record)?;
            }
        }
    }
    w.flush()?;
    println!(
        "wrote episode {episode} reports to {}",
        out.join(REPORTS).display()
    );
    run.finish()
}
