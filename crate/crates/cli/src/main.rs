mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eatformer::Error;

use config::ConfigMap;

#[derive(Parser)]
#[command(
    name = "eatformer",
    version,
    about = "Train, evaluate and verify EAT-block vision transformers"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write history, checkpoint, metrics and config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metric report as JSON.
    Eval(EvalArgs),
    /// Run the gradient, oracle and invariant suites.
    Verify(VerifyArgs),
    /// Print per-module parameter and FLOP counts.
    Params(ParamsArgs),
}

/// Configuration layering shared by every command that reads a config.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override any key, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Model preset: desk, micro or desk224.
    #[arg(long)]
    pub preset: Option<String>,
    /// Input resolution (square).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// synth or gtsrb.
    #[arg(long)]
    dataset: Option<String>,
    /// GTSRB root directory (implies --dataset gtsrb).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    /// 64-bit, single thread, no timings: reruns produce identical artifacts.
    #[arg(long)]
    verification: bool,
    /// Output directory (default: $EATFORMER_OUT/train-<dataset>-seed<seed>).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `config.resolved` next to the checkpoint, when present.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// val or train.
    #[arg(long, default_value = "val")]
    split: String,
    /// Include the per-class table.
    #[arg(long)]
    per_class: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradcheck, oracles, identity, wom, params or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward rule, e.g. `conv2d` or `softmax:0.9` (negative control).
    #[arg(long, value_name = "OP[:FACTOR]")]
    inject_fault: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of classes of the head.
    #[arg(long, default_value_t = 43)]
    classes: usize,
    #[arg(long)]
    json: bool,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const VERIFY: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn violations(errs: Vec<String>) -> Self {
        Self::config(format!("invalid configuration:\n  - {}", errs.join("\n  - ")))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericFailure(_) => Self::NUMERIC,
            Error::Io { .. } => 1,
            _ => Self::CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl ConfigArgs {
    /// Layers defaults, the config file (or `fallback`), then overrides.
    fn into_map(self, fallback: Option<PathBuf>, extra: &[(&str, String)]) -> Result<ConfigMap, Failure> {
        let mut map = ConfigMap::default();
        let mut errs = Vec::new();
        if let Some(path) = self.config.or(fallback) {
            errs.extend(map.apply_file(&path));
        }
        for s in &self.set {
            if let Err(e) = map.set_assignment(s) {
                errs.push(e);
            }
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(p) = self.preset {
            flags.push(("model.preset", p));
        }
        if let Some(r) = self.resolution {
            flags.push(("model.resolution", r.to_string()));
        }
        for (k, v) in flags.iter().chain(extra) {
            map.set(k, v).expect("flag keys are known");
        }
        if errs.is_empty() {
            return Ok(map);
        }
        // Report value problems of the keys that did parse as well.
        if let Err(more) = config::RunConfig::from_map(&map) {
            errs.extend(more);
        }
        Err(Failure::violations(errs))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => {
            let mut extra = Vec::new();
            let mut push = |k: &'static str, v: Option<String>| {
                if let Some(v) = v {
                    extra.push((k, v));
                }
            };
            push(
                "data.dataset",
                a.dataset.or(a.data_dir.as_ref().map(|_| "gtsrb".into())),
            );
            push("data.dir", a.data_dir.map(|d| d.display().to_string()));
            push("optim.epochs", a.epochs.map(|v| v.to_string()));
            push("run.seed", a.seed.map(|v| v.to_string()));
            push("optim.learning_rate", a.lr.map(|v| v.to_string()));
            push("optim.batch_size", a.batch_size.map(|v| v.to_string()));
            push("run.threads", a.threads.map(|v| v.to_string()));
            push("optim.precision", a.precision.map(|v| v.to_string()));
            push("run.verification", a.verification.then(|| "true".into()));
            push("run.out", a.out.map(|d| d.display().to_string()));
            let map = a.config.into_map(None, &extra)?;
            commands::train(&map)
        }
        Command::Eval(a) => {
            let sibling = a.checkpoint.with_file_name(commands::CONFIG_FILE);
            let fallback = sibling.is_file().then_some(sibling);
            let mut extra = Vec::new();
            if let Some(d) = &a.data_dir {
                extra.push(("data.dataset", "gtsrb".to_string()));
                extra.push(("data.dir", d.display().to_string()));
            }
            let map = a.config.into_map(fallback, &extra)?;
            commands::eval(&a.checkpoint, &map, &a.split, a.per_class)
        }
        Command::Verify(a) => commands::verify(&a.suite, a.seed, a.inject_fault.as_deref(), a.json),
        Command::Params(a) => {
            let map = a.config.into_map(None, &[])?;
            commands::params(&map, a.classes, a.json)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
