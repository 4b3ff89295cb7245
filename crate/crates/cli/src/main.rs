//! `forge <command> --config <path> [--out <dir>] [--seed <n>]`

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "forge", version, about = "Surrogate-decoder testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration document.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `out/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic text and VQA corpora.
    GenData(Common),
    /// Train the toy target language model on the text corpus.
    TrainTarget(Common),
    /// Layer-wise prediction trajectories and the transition layer.
    Trajectory(Common),
    /// Build a surrogate (or its control variant) from a target.
    Surgery(Common),
    /// Run one training stage.
    Stage(Common),
    /// Grafting comparison and convergence accounting.
    Report(Common),
    /// The whole reference experiment.
    Pipeline(Common),
}

fn init_threads() {
    let Ok(v) = std::env::var("FORGE_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring FORGE_THREADS={v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    let result = match &cli.command {
        Command::GenData(c) => commands::gen_data(c),
        Command::TrainTarget(c) => commands::train_target(c),
        Command::Trajectory(c) => commands::trajectory(c),
        Command::Surgery(c) => commands::surgery(c),
        Command::Stage(c) => commands::stage(c),
        Command::Report(c) => commands::report(c),
        Command::Pipeline(c) => commands::pipeline(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
