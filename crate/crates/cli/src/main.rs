//! `dist`: knowledge building, episodic training, evaluation, ablations and
//! per-episode reports.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "dist",
    version,
    about = "Few-shot action recognition with attribute knowledge"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attribute knowledge base commands.
    #[command(subcommand)]
    Knowledge(KnowledgeCommand),
    /// Write a synthetic dataset manifest, its label list and a fixture KB response file.
    Synth(SynthArgs),
    /// Episodic training.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a reference scorer) on held-out episodes.
    Eval(EvalArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Ablate(AblateArgs),
    /// Dump per-query scores and temporal attention of one episode as CSV.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum KnowledgeCommand {
    /// Generate spatial and temporal attributes for every label.
    Build(KnowledgeBuildArgs),
}

#[derive(Args, Debug)]
struct KnowledgeBuildArgs {
    /// Text file with one class label per line.
    #[arg(long)]
    labels: PathBuf,
    /// Spatial attributes per class.
    #[arg(long, default_value_t = 6)]
    g: usize,
    /// Temporal attributes per class.
    #[arg(long, default_value_t = 3)]
    l: usize,
    /// KB file to write. An existing file is reused as a cache.
    #[arg(long)]
    out: PathBuf,
    /// Offline responses instead of the HTTP client (DIST_LLM_URL, DIST_LLM_MODEL, DIST_LLM_KEY).
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_inflight: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synthetic spec JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset manifest, or a synthetic spec JSON to generate one from.
    #[arg(long)]
    data: PathBuf,
    /// Seed used when `--data` is a synthetic spec.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config JSON; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kb: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Model,
    /// Infinite logit on the true class.
    Oracle,
    /// Uniform random logits.
    Random,
    /// Cosine between time-averaged frame features.
    FrameMean,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to the KB stored with the checkpoint.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Defaults to the checkpoint's eval config.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "model")]
    scorer: ScorerKind,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to the directory holding the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// Fusion weight of the spatial distance.
    Alpha,
    /// Spatial attributes per class.
    G,
    /// Temporal attributes per class.
    L,
    /// Number of spatial prototypes.
    N,
    /// Temporal metric: otam or bi_mhm.
    Metric,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum, ignore_case = true)]
    sweep: Sweep,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// KB path; `{}` is replaced by the swept value (for G and L sweeps).
    #[arg(long)]
    kb: String,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation episodes per cell; defaults to the config's.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Write the per-query score and attention CSVs of one evaluation episode.
    #[arg(long)]
    episode_dump: bool,
    /// Which evaluation episode to dump.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Knowledge(KnowledgeCommand::Build(a)) => commands::knowledge_build(
            &a.labels,
            a.g,
            a.l,
            &a.out,
            a.fixture.as_deref(),
            a.max_inflight,
        ),
        Command::Synth(a) => commands::synth(a.spec.as_deref(), a.seed, &a.out),
        Command::Train(a) => commands::train(a.config.as_deref(), &a.kb, &a.data, &a.out),
        Command::Eval(a) => commands::eval(&commands::EvalRequest {
            checkpoint: a.checkpoint,
            data: a.data,
            kb: a.kb,
            episodes: a.episodes,
            seed: a.seed,
            split: a.split,
            scorer: a.scorer,
            workers: a.workers,
            out: a.out,
        }),
        Command::Ablate(a) => commands::ablate(&commands::AblateRequest {
            sweep: a.sweep,
            values: a.values,
            config: a.config,
            kb: a.kb,
            data: a.data,
            episodes: a.episodes,
            workers: a.workers,
            out: a.out,
        }),
        Command::Report(a) => {
            if !a.episode_dump {
                Err(run::usage("report needs --episode-dump"))
            } else {
                commands::report(
                    &a.checkpoint,
                    &a.data,
                    a.kb.as_deref(),
                    a.episode,
                    a.seed,
                    &a.split,
                    a.out.as_deref(),
                )
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
