use std::path::PathBuf;
use std::process::ExitCode;

use cba_lab::{commands, LabError, Options, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cba", version, about = "Contextual background patch attacks on toy aerial detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scene splits to PNG with a JSON index.
    GenScenes(Common),
    /// Train one detector per configured variant.
    TrainDetector(Common),
    /// Optimize patches against the trained detectors.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Continue the interrupted attack run in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score patches on every model and build the transfer matrix.
    Eval(Common),
    /// Sweep the total-variation weight.
    AblateTv(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use inputs produced under a different config.
    #[arg(long)]
    allow_hash_mismatch: bool,
    #[arg(long, short, conflicts_with = "verbose")]
    quiet: bool,
    #[arg(long, short)]
    verbose: bool,
}

fn run(cli: Cli) -> Result<(), LabError> {
    let (common, resume) = match &cli.command {
        Command::GenScenes(c) | Command::TrainDetector(c) | Command::Eval(c) | Command::AblateTv(c) => (c, None),
        Command::Attack { common, resume } => (common, resume.clone()),
    };
    let level = if common.quiet {
        log::LevelFilter::Warn
    } else if common.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| LabError::Config("no output directory: pass --out or set out_dir".into()))?;
    log::info!("config hash {}", cfg.hash());
    let opts = Options { out, allow_hash_mismatch: common.allow_hash_mismatch, resume };
    let dir = match cli.command {
        Command::GenScenes(_) => commands::gen_scenes(&cfg, &opts)?,
        Command::TrainDetector(_) => commands::train_detectors(&cfg, &opts)?,
        Command::Attack { .. } => commands::attack(&cfg, &opts)?,
        Command::Eval(_) => commands::eval(&cfg, &opts)?,
        Command::AblateTv(_) => commands::ablate_tv(&cfg, &opts)?,
    };
    log::info!("run written to {}", dir.display());
    Ok(())
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
