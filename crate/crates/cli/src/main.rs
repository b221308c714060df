use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmfuse::aggregator::PosMode;
use mmfuse::retrieval::Precision;
use mmfuse::trainer::CropMode;

mod commands;

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Train and query multi-expert text-to-video retrieval models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic corpora, expert files, manifests and a run config.
    Gen(GenArgs),
    /// Run the configured training stages.
    Train(TrainArgs),
    /// Print retrieval metrics for a manifest.
    Eval(EvalArgs),
    /// Encode the videos of a manifest into a gallery file.
    Gallery(GalleryArgs),
    /// Rank gallery videos for each query line.
    Search(SearchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Noisy pre-training corpus plus clean, image and validation corpora.
    Desk,
    /// 64 clean pairs that a short run memorizes.
    Overfit,
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 3000)]
    pub noisy_items: usize,
    #[arg(long, default_value_t = 256)]
    pub clean_items: usize,
    #[arg(long, default_value_t = 300)]
    pub image_items: usize,
    #[arg(long, default_value_t = 200)]
    pub val_items: usize,
}

/// Overrides applied on top of the run config.
#[derive(Args, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pos_mode: Option<PosMode>,
    #[arg(long)]
    pub crop: Option<CropMode>,
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from a train-state file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Parameters to evaluate; a freshly initialized model when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run config; defaults to the effective config next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the config's validation manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct GalleryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One query per line.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

fn init_threads() -> mmfuse::Result<()> {
    if let Ok(v) = std::env::var("MMFUSE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| mmfuse::Error::Config(format!("MMFUSE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| mmfuse::Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gallery(a) => commands::gallery(&a),
        Command::Search(a) => commands::search(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
