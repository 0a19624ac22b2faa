//! `moepot` command-line interface: data generation, training, evaluation,
//! router interpretation and checkpoint inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moepot::data::Family;
use moepot::Error;

#[derive(Debug, Parser)]
#[command(name = "moepot", version, about = "Mixture-of-experts Fourier neural operator for PDE surrogates")]
pub struct Cli {
    /// Run configuration (TOML with model/train/data/eval sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model preset: tiny, small, medium or desk.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the resolved run configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Validate inputs and run one batch without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic trajectory files.
    GenData(GenDataArgs),
    /// Pre-train on a dataset mixture from a fresh initialization.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on one dataset with the router frozen.
    Finetune(FinetuneArgs),
    /// Held-out one-step and rollout errors, expert usage and classification.
    Eval(EvalArgs),
    /// Per-block dataset classification accuracy and expert usage.
    Interpret(InterpretArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| format!("unknown family {s:?} (expected heat, advection or reaction_diffusion)"))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Families to generate, comma separated.
    #[arg(long, required = true, value_delimiter = ',', value_parser = parse_family)]
    pub family: Vec<Family>,
    /// Trajectories per file.
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    #[arg(long)]
    pub t_total: Option<usize>,
    /// Square grid extent.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub diffusivity: Option<f64>,
    /// Advection velocity `cx,cy`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub velocity: Option<Vec<f64>>,
    /// Pure diffusion for the reaction-diffusion family.
    #[arg(long)]
    pub no_reaction: bool,
}

/// Training overrides on top of the config's `train` section.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Balance-loss weight.
    #[arg(long)]
    pub w_bal: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Trajectory file, optionally `PATH=WEIGHT`; repeatable. Replaces the
    /// config's data entries.
    #[arg(long)]
    pub data: Vec<String>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Trajectory file to fine-tune on.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Vec<String>,
    /// Rollout horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Predicted/ground-truth frame pairs written as PGM per dataset.
    #[arg(long)]
    pub dump_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigConflict(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.command.is_none() && !cli.print_config {
        use clap::CommandFactory;
        Cli::command().error(clap::error::ErrorKind::MissingSubcommand, "a command is required").exit();
    }
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOEPOT_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
