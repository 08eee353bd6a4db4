mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

/// Variance-reduced stochastic optimization with adaptive step sizes.
#[derive(Parser)]
#[command(name = "vradapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file and write its trace as CSV.
    Run(RunArgs),
    /// Run every point of a parameter grid.
    Sweep(SweepArgs),
    /// Check the estimator inequalities by Monte-Carlo sampling.
    Verify(VerifyArgs),
    /// Print the registered estimator constants.
    Constants(ConstantsArgs),
    /// Parse a LIBSVM file and print a summary.
    Ingest(IngestArgs),
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trace destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed and `VRADAPT_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Base config; may contain `grid.<key> = v1, v2` axes.
    #[arg(long)]
    config: PathBuf,
    /// Extra axis `key=v1,v2,...`, appended after the file's axes.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    grid: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for per-point trace CSVs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["method", "all"])))]
pub struct VerifyArgs {
    #[arg(long)]
    method: Option<String>,
    /// Every method with registered constants.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    states: usize,
    /// Scale one constant before checking, e.g. `C:0.5`.
    #[arg(long, value_name = "FIELD:FACTOR")]
    perturb: Option<String>,
    /// Margin CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["method", "all"])))]
pub struct ConstantsArgs {
    #[arg(long)]
    method: Option<String>,
    /// One row per method, sharing the given hyperparameters.
    #[arg(long)]
    all: bool,
    /// Components, or clients for the distributed methods.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Batch size; `n` and `d` stand for the full count.
    #[arg(long, default_value = "1")]
    b: String,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Kept coordinates; sets δ and ω to d/k unless given.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    /// Keep only the first rows.
    #[arg(long)]
    rows: Option<usize>,
    /// Write the parsed set back as LIBSVM with ±1 labels.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Verify(a) => commands::verify(a),
        Command::Constants(a) => commands::constants(a),
        Command::Ingest(a) => commands::ingest(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
