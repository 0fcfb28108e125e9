mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negadapt::evalkit::{R2Form, HISTOGRAM_SAMPLE};
use negadapt::qstate::SystemKind;

use crate::error::CliError;

/// Learned adaptive collective measurements for estimating negativity.
#[derive(Debug, Parser)]
#[command(name = "negadapt", version)]
struct Cli {
    /// Single-threaded execution for bitwise reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a dataset manifest (and optionally the raw states).
    Gen(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train several models with consecutive model seeds and evaluate them.
    Series(SeriesArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Merge evaluation results into per-n tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_system)]
    system: SystemKind,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Manifest path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the density matrices in binary form.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SeriesArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = R2Arg::Literal)]
    r2: R2Arg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model identifier in the metrics table (defaults to the file stem).
    #[arg(long)]
    id: Option<String>,
    /// States in the 2-D histogram.
    #[arg(long, default_value_t = HISTOGRAM_SAMPLE)]
    histogram_sample: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// `metrics.json` files or directories searched for them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = R2Arg::Literal)]
    r2: R2Arg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum R2Arg {
    Literal,
    Conventional,
}

impl From<R2Arg> for R2Form {
    fn from(a: R2Arg) -> Self {
        match a {
            R2Arg::Literal => R2Form::Literal,
            R2Arg::Conventional => R2Form::Conventional,
        }
    }
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    s.parse()
}

fn configure_threads(deterministic: bool) -> Result<(), CliError> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("NEGADAPT_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::config(format!("NEGADAPT_THREADS={v} is not a positive integer")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.deterministic)?;
    let progress = !cli.quiet;
    match cli.command {
        Command::Gen(a) => commands::gen(a.system, a.count, a.seed, &a.out, a.export.as_deref()),
        Command::Train(a) => commands::train(&a.config, &a.out, progress),
        Command::Series(a) => commands::series(&a.config, &a.out, a.repeats, a.r2.into(), progress),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.manifest, &a.out, a.id, a.histogram_sample),
        Command::Report(a) => commands::report(&a.inputs, &a.out, a.r2.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
