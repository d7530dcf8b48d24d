//! `agc`: command-line pipeline over the channel modelling core.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "agc", version, about = "Environment-aware air-to-ground channel modelling pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for relative paths inside the config file.
    #[arg(long, global = true, env = "AGC_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Output directory (overrides paths.output).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub dem: Option<PathBuf>,
    #[arg(long, global = true)]
    pub landcover: Option<PathBuf>,
    #[arg(long, global = true)]
    pub function: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weather: Option<PathBuf>,
    /// Override any config value, e.g. `--set sampling.k=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load and validate input rasters; write aligned grids.
    Ingest,
    /// Terrain derivatives, landform classes and reflection map.
    Terrain,
    /// Fit the clusters and report quotas.
    Cluster(SampleArgs),
    /// Draw the sample manifest.
    Sample(SampleArgs),
    /// Trace one link and print its profile record.
    Trace(TraceArgs),
    /// Estimate every link of the manifest.
    Estimate,
    /// Attenuation heat maps and obstruction rates.
    Map,
    /// Write AGX1 training tiles from the estimates.
    ExportTiles,
    /// Mosaic predicted AGX1 tiles back onto the DEM grid.
    ImportPreds(ImportArgs),
    /// Agreement between two series.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Total sample budget.
    #[arg(short = 'S', long)]
    pub budget: Option<usize>,
    #[arg(short = 'k', long)]
    pub clusters: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TraceArgs {
    #[arg(long)]
    pub point: usize,
    #[arg(long)]
    pub elev: f64,
    #[arg(long)]
    pub az: f64,
    /// Satellite altitude; defaults to the first configured altitude.
    #[arg(long)]
    pub alt: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct ImportArgs {
    /// AGX1 files or directories holding them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Pearson,
    Sign,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    pub metric: Metric,
    pub a: PathBuf,
    pub b: PathBuf,
    /// Column name; defaults to the first column.
    #[arg(long)]
    pub column: Option<String>,
    /// Circular moving-average window applied to both series first.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

/// Input the user can fix: bad flags, config or data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

fn is_invalid(err: &anyhow::Error) -> bool {
    fn core_invalid(e: &agc_core::Error) -> bool {
        use agc_core::Error as E;
        match e {
            E::Validation(_)
            | E::Argument(_)
            | E::Config(_)
            | E::Parse { .. }
            | E::Geometry(_)
            | E::Size(_)
            | E::UndefinedCorrelation(_) => true,
            E::Link { source, .. } => core_invalid(source),
            _ => false,
        }
    }
    err.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some() || c.downcast_ref::<agc_core::Error>().is_some_and(core_invalid)
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Invalid("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    commands::dispatch(&cli.global, &cli.command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_invalid(&e) { 1 } else { 2 })
        }
    }
}
