use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcasr_core::eval::{ExperimentConfig, Pipeline, Stage};
use dcasr_core::{Error, Result};

/// Diffusion-guided counterfactual augmentation for session-based
/// recommendation.
#[derive(Parser, Debug)]
#[command(name = "dcasr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Produce the observed slate log and the train/valid/test sessions.
    SimulateLog,
    /// Train the diffusion slate generator and pick the guidance weight.
    TrainDiffusion,
    /// Train the structural response model.
    TrainScm,
    /// Train the recommender on observed data, and on observed plus
    /// counterfactual data when counterfactuals exist.
    TrainSr,
    /// Synthesize counterfactual sessions.
    Augment,
    /// Offline next-item metrics per popularity bucket.
    EvalOffline,
    /// Online CTR and ARP against the simulator.
    EvalOnline,
    /// Every stage in order.
    RunAll,
    /// Print the effective config as JSON.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::SimulateLog => Stage::SimulateLog,
            Command::TrainDiffusion => Stage::TrainDiffusion,
            Command::TrainScm => Stage::TrainScm,
            Command::TrainSr => Stage::TrainSr,
            Command::Augment => Stage::Augment,
            Command::EvalOffline => Stage::EvalOffline,
            Command::EvalOnline => Stage::EvalOnline,
            Command::RunAll => Stage::RunAll,
            Command::ShowConfig => return None,
        })
    }
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let Some(stage) = cli.command.stage() else {
        let json = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        println!("{json}");
        return Ok(());
    };
    let pipeline = Pipeline::new(cfg)?;
    for report in pipeline.run(stage)? {
        if stage == Stage::RunAll && report.stage != Stage::RunAll.name() {
            continue;
        }
        print!("{}", report.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
