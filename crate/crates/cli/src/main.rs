//! `aim`: dataset generation, training, sampling, evaluation, benchmarks and inspection.

mod commands;
mod keys;

use std::process::ExitCode;

use aim_core::config::RunConfig;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use keys::Namespaces;

#[derive(Parser, Debug)]
#[command(name = "aim", version, about = "Class-conditional Mamba image generation over token grids")]
pub struct Cli {
    /// Worker threads; falls back to AIM_THREADS, then one per core
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic token dataset
    Dataset(DatasetArgs),
    /// Train a model, writing checkpoints and a metrics log
    Train(TrainArgs),
    /// Generate images and token files from a checkpoint
    Sample(SampleArgs),
    /// Report NLL and class consistency of a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Time incremental decoding against sequence length
    Bench(BenchArgs),
    /// Print a checkpoint's configuration, tensor census and parameter count
    Inspect(InspectArgs),
    /// Train and compare positional-encoding and conditioning-group variants
    Ablate(AblateArgs),
    /// Train two or more widths under one budget and compare eval NLL
    Scale(ScaleArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Config file with data.* keys
    #[arg(long, value_name = "FILE")]
    pub spec: Option<String>,
    /// Output dataset file
    #[arg(long, value_name = "FILE")]
    pub out: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file with model.* and train.* keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    /// Dataset file from `aim dataset`
    #[arg(long, value_name = "FILE")]
    pub data: String,
    /// Directory for checkpoints, metrics.tsv and config.txt
    #[arg(long, value_name = "DIR")]
    pub out_dir: String,
    /// Checkpoint to continue from; its configuration is the base
    #[arg(long, value_name = "FILE")]
    pub resume: Option<String>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Config file with sample.* keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    /// Checkpoint to sample from
    #[arg(long, value_name = "FILE")]
    pub ckpt: String,
    /// Directory for .ppm images and .tokens files
    #[arg(long, value_name = "DIR")]
    pub out_dir: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    pub ckpt: String,
    /// Dataset file from `aim dataset`
    #[arg(long, value_name = "FILE")]
    pub data: String,
    /// Split to score: train, eval or all
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// Samples per class for class consistency
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Guidance scale for the consistency samples
    #[arg(long, default_value_t = 2.0)]
    pub w: f64,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// mamba, attention or both
    #[arg(long, default_value = "both")]
    pub kind: String,
    /// Comma-separated decode lengths
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048")]
    pub lengths: Vec<usize>,
    /// Sequences decoded together
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Model width shared by both kinds
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    /// Layers shared by both kinds
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    /// Mamba state size per channel
    #[arg(long, default_value_t = 16)]
    pub state_dim: usize,
    /// Timed trials per length
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Discarded trials per length
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Weight initialization seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for bench.txt, bench.csv and bench_<kind>.dat
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint to describe
    #[arg(long, value_name = "FILE", required_unless_present = "preset", conflicts_with = "preset")]
    pub ckpt: Option<String>,
    /// Describe a named shape without weights: micro, aim-b, aim-l or aim-xl
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Config file with model.* and train.* keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    /// Dataset file from `aim dataset`
    #[arg(long, value_name = "FILE")]
    pub data: String,
    /// Directory for ablation.txt and ablation.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comma-separated conditioning group counts
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub groups: Vec<usize>,
    /// Comma-separated guidance scales for the consistency sweep
    #[arg(long, value_delimiter = ',', default_value = "0,1,1.5,2")]
    pub cfg_weights: Vec<f64>,
    /// Samples per class for the sampled metrics
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    /// Config file with model.* and train.* keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    /// Dataset file from `aim dataset`
    #[arg(long, value_name = "FILE")]
    pub data: String,
    /// Directory for scaling.txt and scaling.dat
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Comma-separated model widths
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    pub widths: Vec<usize>,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
}

/// Subcommands whose config keys are flags, with their defaults.
fn keyed() -> [(&'static str, Namespaces, RunConfig); 5] {
    [
        ("dataset", keys::DATASET, RunConfig::default()),
        ("train", keys::TRAIN, RunConfig::default()),
        ("sample", keys::SAMPLE, RunConfig::default()),
        ("ablate", keys::TRAIN, commands::ablate_defaults()),
        ("scale", keys::TRAIN, commands::scale_defaults()),
    ]
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, ns, defaults) in keyed() {
        cmd = cmd.mut_subcommand(name, |sub| ns.augment(sub, &defaults));
    }
    cmd
}

/// One line: `error[<kind>]: <message>`.
fn error_line(kind: &str, msg: &str) -> String {
    let flat: Vec<&str> = msg.split_whitespace().collect();
    format!("error[{kind}]: {}", flat.join(" "))
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn chain_text(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn kind_of(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<aim_core::Error>() {
        Some(aim_core::Error::Shape { .. }) => "shape",
        Some(aim_core::Error::NonFinite { .. }) => "nonfinite",
        Some(aim_core::Error::Invalid(_)) => "invalid",
        Some(aim_core::Error::Autodiff(_)) => "autodiff",
        Some(aim_core::Error::Diverged { .. }) => "diverged",
        Some(aim_core::Error::Format(_)) => "format",
        Some(aim_core::Error::Io(_)) => "io",
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "invalid",
    }
}

fn threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("AIM_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| anyhow::anyhow!("AIM_THREADS must be a positive integer, got {v:?}"))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        anyhow::bail!("thread count must be at least 1");
    }
    Ok(n)
}

fn run(matches: &clap::ArgMatches) -> anyhow::Result<()> {
    let cli = Cli::from_arg_matches(matches)?;
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Cmd::Dataset(a) => commands::dataset(a, sub, &mut out),
        Cmd::Train(a) => commands::train(a, sub, &mut out),
        Cmd::Sample(a) => commands::sample(a, sub, &mut out),
        Cmd::Eval(a) => commands::eval(a, &mut out),
        Cmd::Bench(a) => commands::bench(a, &mut out),
        Cmd::Inspect(a) => commands::inspect(a, &mut out),
        Cmd::Ablate(a) => commands::ablate(a, sub, &mut out),
        Cmd::Scale(a) => commands::scale(a, sub, &mut out),
    }
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(kind_of(&e), &chain_text(&e)));
            ExitCode::FAILURE
        }
    }
}
