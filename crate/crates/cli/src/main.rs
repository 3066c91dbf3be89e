mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::TrainFlags;

#[derive(Parser, Debug)]
#[command(name = "einet", version, about = "Train, evaluate and sample einsum networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Build a structure, train it with EM and write a model file.
    Train(TrainFlags),
    /// Mean and total log-likelihood of a dataset.
    Eval(EvalArgs),
    /// Draw unconditional samples.
    Sample(SampleArgs),
    /// Fill in covered variables by conditional sampling.
    Inpaint(InpaintArgs),
    /// Time both engines over a grid of K, depth and replica counts.
    Bench(BenchArgs),
    /// Compare the batched engine with the scalar oracle on random fixtures.
    #[command(hide = true)]
    OracleCheck(OracleCheckArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write one log-likelihood per line to this file.
    #[arg(long)]
    per_sample: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.pgm` writes an image grid, anything else CSV.
    #[arg(long)]
    out: PathBuf,
    /// Images per grid row.
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Multiplier from values to 8-bit pixels (defaults to 255 for normalized models, else 1).
    #[arg(long)]
    pixel_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Cover {
    LeftHalf,
    TopHalf,
}

#[derive(Args, Debug)]
struct InpaintArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evidence rows (CSV or binary dataset).
    #[arg(long)]
    data: PathBuf,
    /// Image region to hide and reconstruct.
    #[arg(long, value_enum, conflicts_with = "missing")]
    cover: Option<Cover>,
    /// Comma-separated variable indices to hide and reconstruct.
    #[arg(long, value_delimiter = ',')]
    missing: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.pgm` writes an image grid, anything else CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long)]
    pixel_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    depth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    replica: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Number of variables of the synthetic Gaussian data.
    #[arg(long, default_value_t = 512)]
    d_vars: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "einsum,oracle")]
    engines: Vec<EngineArg>,
    #[arg(long)]
    forward_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Einsum,
    Oracle,
}

#[derive(Args, Debug)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 100)]
    fixtures: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(flags) => commands::train(&flags),
        Command::Eval(a) => commands::eval(&a.model, &a.data, a.per_sample.as_deref()),
        Command::Sample(a) => commands::sample(&a.model, a.n, a.seed, &a.out, a.cols, a.pixel_scale),
        Command::Inpaint(a) => {
            let mask = match (a.cover, a.missing) {
                (Some(Cover::LeftHalf), _) => commands::Mask::LeftHalf,
                (Some(Cover::TopHalf), _) => commands::Mask::TopHalf,
                (None, Some(idx)) => commands::Mask::Vars(idx),
                (None, None) => {
                    return commands::report(commands::usage("inpaint needs --cover or --missing"));
                }
            };
            commands::inpaint(&a.model, &a.data, &mask, a.seed, &a.out, a.cols, a.pixel_scale)
        }
        Command::Bench(a) => {
            let cfg = einet::bench::BenchConfig {
                ks: a.k,
                depths: a.depth,
                replicas: a.replica,
                batch: a.batch,
                d_vars: a.d_vars,
                repeats: a.repeats,
                seed: a.seed,
                engines: a
                    .engines
                    .iter()
                    .map(|e| match e {
                        EngineArg::Einsum => einet::bench::BenchEngine::Einsum,
                        EngineArg::Oracle => einet::bench::BenchEngine::Oracle,
                    })
                    .collect(),
                forward_only: a.forward_only,
            };
            commands::bench(&cfg, a.out.as_deref())
        }
        Command::OracleCheck(a) => commands::oracle_check(a.fixtures, a.tol, a.seed),
    };
    commands::report(result)
}
