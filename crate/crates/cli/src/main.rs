mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hero_core::HeroError;

use crate::config::RunConfig;

/// Hierarchical video and subtitle encoder: data generation, pre-training,
/// fine-tuning, evaluation and attention dumps.
#[derive(Debug, Parser)]
#[command(name = "hero", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and its vocabulary.
    GenData(GenDataArgs),
    /// Write a toy downstream task file drawn from a corpus.
    GenTasks(GenTasksArgs),
    /// Pre-train on a corpus with the multi-task scheduler.
    Pretrain(PretrainArgs),
    /// Fine-tune on a downstream task file.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a task file.
    Eval(EvalArgs),
    /// Dump cross-modal attention maps of one clip.
    InspectAttention(InspectArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    fps: f64,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 64)]
    topics: usize,
    /// Tie subtitle words to frame features through shared topics.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    planted: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenTasksArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    /// Clips to draw from; all by default.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long, default_value_t = 2)]
    per_clip: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Flags shared by the training commands. Each overrides the config file.
#[derive(Debug, Args)]
struct RunFlags {
    /// Flat TOML file of run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Worker threads for corpus alignment.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl RunFlags {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })* };
        }
        set!(seed, steps, batch_size, weight_decay, log, threads, d, dropout);
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated subset of mlm, mffr, mnce, vsm, fom.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunFlags,
    /// retrieval, qa, nli or caption.
    #[arg(long)]
    task: String,
    /// Task file.
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained checkpoint to start from.
    #[arg(long, required_unless_present = "from_scratch")]
    init: Option<PathBuf>,
    /// Start from random weights instead of a checkpoint.
    #[arg(long, conflicts_with = "init")]
    from_scratch: bool,
    /// QA span loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Output checkpoint; defaults to `<checkpoint_dir>/<task>.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = hero_core::metrics::DEFAULT_TIOU_THRESHOLD)]
    tiou: f64,
    /// Temporal NMS threshold, or `off`.
    #[arg(long, default_value = "0.5")]
    nms: String,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    k: Vec<usize>,
    /// Longest greedy caption.
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    clip: String,
    #[arg(long)]
    out: PathBuf,
}

/// 0 success, 1 usage, 2 data or schema, 3 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<HeroError>() {
            return match e {
                HeroError::Usage(_) | HeroError::Config(_) => 1,
                HeroError::Numeric(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::GenTasks(a) => commands::gen_tasks(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::InspectAttention(a) => commands::inspect_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
