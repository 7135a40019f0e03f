//! `metadiff`: dataset generation, training, sampling, evaluation and
//! container inspection.
//!
//! Exit codes: 0 success, 2 bad arguments or config, 3 I/O failure,
//! 4 corrupt or incompatible file, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metadiff::Error;

#[derive(Parser)]
#[command(name = "metadiff", version, about = "Conditional diffusion for symmetric meta-atom inverse design")]
struct Cli {
    /// Worker threads (default: METADIFF_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Generate structures for one target condition.
    Sample(SampleArgs),
    /// Score generated structures against their targets.
    Eval(EvalArgs),
    /// Validate and describe a dataset or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples (at least 10).
    #[arg(long)]
    n: usize,
    /// Full grid side (even).
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    proxy_seed: u64,
    /// Hidden width of the surrogate.
    #[arg(long, default_value_t = metadiff::surrogate::DEFAULT_FEATURES)]
    n_features: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML (or .json) config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or container file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(long)]
    timesteps: Option<usize>,
    /// Channel widths per level, finest first, e.g. `16,32`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    time_embed: Option<usize>,
    #[arg(long)]
    cond_embed: Option<usize>,
    #[arg(long)]
    norm_groups: Option<usize>,
    /// Validation conditions generated per epoch.
    #[arg(long)]
    val_cap: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Also write per-epoch wall-clock seconds to timing.csv.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON file: {"spectral": [52 values], "w1": .., "h2": .., "n2": ..}.
    #[arg(long)]
    condition: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = metadiff::sampler::DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with_all = ["samples", "baseline"])]
    checkpoint: Option<PathBuf>,
    /// Dataset directory or container file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = metadiff::sampler::DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score the random-structure baseline instead of a checkpoint.
    #[arg(long, conflicts_with = "samples")]
    baseline: bool,
    /// Re-score the output directory of a `sample` run.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Dataset directory, dataset container or checkpoint.
    path: PathBuf,
}

/// A failure with the exit code it maps to.
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig { .. }
            | Error::OutOfRange { .. }
            | Error::ReservedCondition
            | Error::LengthMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::ScheduleMismatch { .. }
            | Error::InvalidTimesteps(_)
            | Error::Empty(_) => 2,
            Error::Io(_) => 3,
            Error::CorruptContainer(_) | Error::VersionMismatch { .. } => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag.filter(|&n| n > 0));
    }
    match std::env::var("METADIFF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| (n > 0).then_some(n))
            .map_err(|_| Failure::usage(format!("METADIFF_THREADS=`{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count(cli.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("threads: {e}")))?;
    }
    let threads = threads.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, threads),
        Command::Train(a) => commands::train(a, threads),
        Command::Sample(a) => commands::sample(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Inspect(a) => commands::inspect(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
