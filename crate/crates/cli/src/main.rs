mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "cqf",
    version,
    about = "Memory-augmented multi-turn dialogue model: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

/// `on`, `off`, or a queue capacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryArg {
    On,
    Off,
    Capacity(usize),
}

impl FromStr for MemoryArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(MemoryArg::On),
            "off" => Ok(MemoryArg::Off),
            n => n
                .parse()
                .map(MemoryArg::Capacity)
                .map_err(|_| format!("expected on, off or a capacity, got `{s}`")),
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate synthetic dialogue corpora, one file per category.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Only this category (e.g. long_memory).
        #[arg(long)]
        category: Option<String>,
        /// Dialogues per category.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the base language model that later stages freeze.
    BaseLm {
        #[command(flatten)]
        common: Common,
        /// Corpus file or directory of corpus files.
        #[arg(long)]
        data: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<u64>,
        /// Continue from an intermediate checkpoint of this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 1: align the visual path to the frozen LM on image captions.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus file or directory of corpus files.
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint (usually the base LM).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<u64>,
        /// Continue from an intermediate checkpoint of this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: multi-turn fine-tuning with the memory queue.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Corpus file or directory of corpus files.
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<u64>,
        /// `on`, `off` or a capacity; overrides the configured capacity.
        #[arg(long)]
        memory: Option<MemoryArg>,
        /// Continue from an intermediate checkpoint of this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recall benchmark and/or judge-score aggregation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Long-memory taskset (and corpus for per-category judge reports).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Judge score file, one JSON record per line.
        #[arg(long)]
        judge: Option<PathBuf>,
        /// `on`, `off` (capacity 0) or a capacity.
        #[arg(long, default_value = "on")]
        memory: MemoryArg,
        /// Average judge scores per dialogue instead of per turn.
        #[arg(long)]
        per_dialogue: bool,
    },
    /// Interactive chat on stdin; `/image <id>`, `/memory`, `/quit`.
    Chat {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint to chat with.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus whose images can be attached by id.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// `on`, `off` (capacity 0) or a capacity.
        #[arg(long, default_value = "on")]
        memory: MemoryArg,
        #[arg(long, default_value_t = 48)]
        max_new_tokens: usize,
    },
    /// Memory ablation: base LM, then memory and LoRA-only arms scored on
    /// planted-fact recall. Uses its own preset; only the seed is taken
    /// from the run configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Fine-tuning iterations per arm.
        #[arg(long)]
        iters: Option<u64>,
        /// Evaluation dialogues per condition.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Corpus statistics table, one row per corpus file.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Corpus files or directories of corpus files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::BaseLm { .. } => "base-lm",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Chat { .. } => "chat",
            Command::Ablate { .. } => "ablate",
            Command::Stats { .. } => "stats",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::BaseLm { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Chat { common, .. }
            | Command::Ablate { common, .. }
            | Command::Stats { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CQF_LOG", "info")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let common = cli.command.common().clone();
    let mut cfg = match RunConfig::load(common.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: creating {}: {e}", common.out.display());
        return ExitCode::FAILURE;
    }
    let mut manifest = RunManifest::new(cli.command.name(), &common.out);
    let result = commands::run(&cli.command, &mut cfg, &mut manifest);
    manifest.finish(&cfg, started.elapsed().as_secs_f64(), result.as_ref().err());
    if let Err(e) = manifest.write() {
        eprintln!("error: writing manifest: {e:#}");
        return ExitCode::FAILURE;
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
