//! `weaverec` command-line driver.
//!
//! Every subcommand starts from the same [`ExperimentConfig`]: defaults, then
//! an optional `key=value` file, then `--set` overrides, then the dedicated
//! flags. Exit codes: 0 success, 1 config, 2 data, 3 training, 4 merge/eval.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaverec::pipeline::{ExperimentConfig, Stage, StageError};

#[derive(Parser)]
#[command(name = "weaverec", version, about = "Cross-domain LoRA merging experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key=value` config file; `#` starts a comment.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set train.rank=8`.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    target: Option<String>,
    /// Comma-separated source domains; empty for none.
    #[arg(long, global = true)]
    sources: Option<String>,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Log filter when `RUST_LOG` is unset.
    #[arg(long, default_value = "info", global = true)]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic domains as interaction/title files plus a config
    /// snippet that ingests them.
    GenData(commands::GenData),
    /// Parse, filter and split interaction files; print per-domain counts.
    Ingest,
    /// Pretrain (or reuse) the base model.
    Pretrain,
    /// Render instruction JSON lines for the target and source domains.
    RenderInstructions(commands::RenderInstructions),
    /// Train one adapter: single-domain, hybrid or all-data.
    TrainAdapter(commands::TrainAdapter),
    /// Merge adapter checkpoints into one checkpoint.
    Merge(commands::Merge),
    /// Evaluate a checkpoint (or the bare base) on the target test split.
    Eval(commands::Eval),
    /// Full pipeline: target adapter, hybrid adapters, merge, evaluation.
    Weaverec,
    /// Train and evaluate comparison methods on the same candidates.
    Baselines(commands::Baselines),
    /// Metric over a 2-D plane through three adapters.
    Landscape(commands::Landscape),
    /// Probe-based divergence between two domain samples.
    Hdiv(commands::Hdiv),
    /// Metric along the target-to-hybrid interpolation path.
    Sweep(commands::Sweep),
}

/// An error plus the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const CONFIG: u8 = 1;
pub const DATA: u8 = 2;
pub const TRAIN: u8 = 3;
pub const MERGE_EVAL: u8 = 4;

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let code = match e.stage {
            Stage::Config => CONFIG,
            Stage::Data => DATA,
            Stage::Train => TRAIN,
            Stage::Merge | Stage::Eval => MERGE_EVAL,
        };
        Failure { code, error: e.into() }
    }
}

/// Tags any error with an exit code.
pub trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn build_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| match e {
                // Already names the file and line.
                weaverec::Error::Parse { .. } => anyhow::Error::from(e),
                e => anyhow::Error::from(e).context(format!("reading {}", path.display())),
            })
            .code(CONFIG)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))
            .code(CONFIG)?;
        config.set(k, v).code(CONFIG)?;
    }
    let flags = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("target", common.target.clone()),
        ("sources", common.sources.clone()),
        (
            "output_dir",
            common.output_dir.as_ref().map(|p| p.display().to_string()),
        ),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v).code(CONFIG)?;
        }
    }
    config.validate().code(CONFIG)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = build_config(&cli.common)?;
    match cli.command {
        Command::GenData(args) => commands::gen_data(&config, &args),
        Command::Ingest => commands::ingest(&config),
        Command::Pretrain => commands::pretrain(&config),
        Command::RenderInstructions(args) => commands::render_instructions(&config, &args),
        Command::TrainAdapter(args) => commands::train_adapter(&config, &args),
        Command::Merge(args) => commands::merge(&config, &args),
        Command::Eval(args) => commands::eval(&config, &args),
        Command::Weaverec => commands::weaverec(&config),
        Command::Baselines(args) => commands::baselines(&config, &args),
        Command::Landscape(args) => commands::landscape(&config, &args),
        Command::Hdiv(args) => commands::hdiv(&config, &args),
        Command::Sweep(args) => commands::sweep(&config, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures; bad flags are
            // configuration errors.
            return if e.use_stderr() {
                ExitCode::from(CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.common.log_level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
