mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Centerline tracking of tubular trees in 3D volumes.
///
/// Every option can also be set in a `key = value` config file passed with
/// `--config`; keys are the long option names. Options given on the command
/// line take precedence over the file, which takes precedence over defaults.
#[derive(Debug, Parser)]
#[command(name = "vesseltrack", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice made by the subcommand.
    #[arg(long, global = true, display_order = 900, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads. Above 1 the tracker predicts each round concurrently.
    #[arg(long, global = true, display_order = 900, default_value_t = 1)]
    pub threads: usize,

    /// Keep the tracker single-threaded regardless of --threads.
    #[arg(long, global = true, display_order = 900)]
    pub deterministic: bool,

    /// Config file with `key = value` lines.
    #[arg(long, global = true, display_order = 900, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Print the resolved options as a config file and exit.
    #[arg(long, global = true, display_order = 900)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tree and its rasterized volume.
    Phantom(commands::PhantomArgs),
    /// Export direction and stop training datasets from cases.
    Dataset(commands::DatasetArgs),
    /// Track a centerline tree from one or two ostia.
    Track(commands::TrackArgs),
    /// Score a tracked tree against a reference tree.
    Eval(commands::EvalArgs),
    /// Write maximum intensity projections with centerline overlays.
    Render(commands::RenderArgs),
    /// Run a network forward pass on one dataset record.
    Forward(commands::ForwardArgs),
    /// Write randomly initialized network weights.
    InitWeights(commands::InitWeightsArgs),
}

/// Failure that should exit with the usage status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_status(e: &anyhow::Error) -> u8 {
    use vesseltrack::Error as E;
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<E>() {
        Some(E::Compatibility(_) | E::ShapeMismatch { .. }) => 4,
        Some(E::InvalidArgument(_)) => 2,
        _ => 3,
    }
}

fn run() -> Result<(), (u8, String)> {
    let raw: Vec<String> = std::env::args().collect();
    let argv = config::merge_config_file(&Cli::command(), raw).map_err(|e| (2, format!("{e:#}")))?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Err((code, String::new()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| (2, e.to_string()))?;
    if cli.global.print_config {
        print!("{}", config::render_config(&Cli::command(), &matches));
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.max(1))
        .build_global()
        .map_err(|e| (3, e.to_string()))?;
    commands::dispatch(&cli).map_err(|e| (exit_status(&e), format!("error: {e:#}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            if !msg.is_empty() {
                eprintln!("{msg}");
            }
            ExitCode::from(code)
        }
    }
}
