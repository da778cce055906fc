use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opesel::{run_stage, Options, Stage, SweepKind};

#[derive(Parser)]
#[command(name = "opesel", version, about = "Model selection for off-policy evaluation on tabular benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Also compute mixed-model backups when building caches.
    #[arg(long)]
    with_backups: bool,
    /// Continue past a failed sanity check and recompute existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the candidate grid and target policies.
    Gen(Common),
    /// Sample the offline datasets.
    Sample(Common),
    /// Roll out and cache candidate Q-values on the datasets.
    Cache(Common),
    /// Run the selectors on the main dataset.
    Select(Common),
    /// Run a sweep over candidate sets or data mixtures.
    Sweep {
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
    },
    /// Print the aggregate tables of every finished report.
    Report(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Gen(c) => (Stage::Gen, c),
        Command::Sample(c) => (Stage::Sample, c),
        Command::Cache(c) => (Stage::Cache, c),
        Command::Select(c) => (Stage::Select, c),
        Command::Sweep { kind, common } => (Stage::Sweep(kind), common),
        Command::Report(c) => (Stage::Report, c),
    };
    if let Some(jobs) = common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let opts = Options { with_backups: common.with_backups, force: common.force, ..Options::default() };
    match run_stage(stage, &common.config, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
