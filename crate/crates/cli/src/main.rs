mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decompnet::rank::{Budget, Criterion};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Train, compress and analyze networks whose weights can be truncated to
/// any rank after training.
#[derive(Parser)]
#[command(name = "decompnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Choose per-layer ranks for a budget.
    Compress(CompressArgs),
    /// Accuracy and loss of a checkpoint, optionally compressed.
    Eval(EvalArgs),
    /// Accuracy and size over a list of budgets.
    Sweep(SweepArgs),
    /// Numerical checks of the layer-error, KL-bound and Lipschitz results.
    Analyze(AnalyzeArgs),
    /// Print layers, ranks, sizes and metadata of a checkpoint.
    Inspect(InspectArgs),
}

fn parse_budget(s: &str) -> Result<Budget, String> {
    s.parse().map_err(|e: decompnet::Error| e.to_string())
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: decompnet::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.criterion`.
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    model: PathBuf,
    /// Defaults to the criterion the model was trained with.
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// `z=<ratio>`, `params=<count>` or `macs=<count>`.
    #[arg(long, value_parser = parse_budget)]
    budget: Budget,
    /// Directory for `assignment.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where evaluation data comes from.
#[derive(Args)]
struct DataArgs {
    /// Take the data section and seed from this config instead of the
    /// checkpoint metadata.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed used for the train/validation split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Evaluate the full-rank model when omitted.
    #[arg(long, value_parser = parse_budget)]
    budget: Option<Budget>,
    /// Directory for `eval.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Repeat for each budget, ascending and of one kind. Defaults to the
    /// training probe ratios.
    #[arg(long, value_parser = parse_budget)]
    budget: Vec<Budget>,
    /// Directory for `sweep.csv`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    /// Layer error against rank.
    Prop1,
    /// KL divergence against its bound.
    Prop2,
    /// Theoretical and empirical Lipschitz constants.
    Lipschitz,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    check: Check,
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Required by `prop2` and `lipschitz`.
    #[arg(long, value_parser = parse_budget)]
    budget: Option<Budget>,
    /// Use at most this many evaluation samples.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Directory for `<check>.csv`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    model: PathBuf,
}

/// Cap rayon's worker count from `DECOMPNET_THREADS`.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DECOMPNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "DECOMPNET_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(&a.config, a.seed, a.criterion, a.out),
        Command::Compress(a) => {
            commands::compress(&a.model, a.criterion, a.budget, a.out.as_deref())
        }
        Command::Eval(a) => commands::eval(
            &a.model,
            &a.data.source(),
            a.criterion,
            a.budget,
            a.out.as_deref(),
        ),
        Command::Sweep(a) => commands::sweep(
            &a.model,
            &a.data.source(),
            a.criterion,
            a.budget,
            a.out.as_deref(),
        ),
        Command::Analyze(a) => {
            let check = match a.check {
                Check::Prop1 => commands::Check::Prop1,
                Check::Prop2 => commands::Check::Prop2,
                Check::Lipschitz => commands::Check::Lipschitz,
            };
            commands::analyze(
                check,
                &a.model,
                &a.data.source(),
                a.criterion,
                a.budget,
                a.samples,
                a.out.as_deref(),
            )
        }
        Command::Inspect(a) => commands::inspect(&a.model),
    }
}

impl DataArgs {
    fn source(&self) -> commands::DataChoice {
        commands::DataChoice {
            config: self.config.clone(),
            seed: self.seed,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
