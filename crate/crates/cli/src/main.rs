use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncp_cli::commands::{self, EvalMode};
use ncp_cli::config::{ExperimentConfig, SeedTarget};
use ncp_core::checkpoint::Checkpoint;
use ncp_core::Result;

/// Train and evaluate recurrent lane-keeping policies on a synthetic driving bench.
#[derive(Parser)]
#[command(name = "ncp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the seed this command draws from.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Openloop,
    Closedloop,
}

#[derive(Subcommand)]
enum Command {
    /// Render expert demonstrations; --seed sets the dataset seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a policy to a dataset; --seed sets the shuffling seed, --out is the checkpoint path.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Open- or closed-loop metrics per noise level; --seed sets the noise seed.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "closedloop")]
        mode: Mode,
        /// Dataset for open-loop evaluation.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured noise variances.
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
        /// Overrides the configured number of closed-loop episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Saliency maps with and without pixel noise; --seed sets the noise seed.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Neuron activity along one noise-free drive; --seed is the track seed.
    Activity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(common: &Common, target: Option<SeedTarget>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let (Some(t), Some(s)) = (target, common.seed) {
        cfg.override_seed(t, s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load(&common, Some(SeedTarget::Data))?;
            let m = commands::gen_data(&cfg, &common.out)?;
            eprintln!("{} episodes ({} summer, {} winter)", m.n_episodes, m.summer, m.winter);
        }
        Command::Train { common, data } => {
            let cfg = load(&common, Some(SeedTarget::Train))?;
            commands::train_cmd(&cfg, &data, &common.out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            mode,
            data,
            noise,
            episodes,
        } => {
            let mut cfg = load(&common, Some(SeedTarget::Eval))?;
            if let Some(n) = noise {
                cfg.eval.noise_variances = n;
            }
            if let Some(n) = episodes {
                cfg.eval.n_episodes = n;
            }
            cfg.validate()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mode = match mode {
                Mode::Openloop => EvalMode::OpenLoop,
                Mode::Closedloop => EvalMode::ClosedLoop,
            };
            print!("{}", commands::eval_cmd(&cfg, &ckpt, mode, data.as_deref(), &common.out)?);
        }
        Command::Saliency {
            common,
            checkpoint,
            data,
            noise,
            frames,
        } => {
            let mut cfg = load(&common, Some(SeedTarget::Eval))?;
            if let Some(n) = noise {
                cfg.eval.noise_variances = n;
            }
            if let Some(n) = frames {
                cfg.eval.saliency_frames = n;
            }
            cfg.validate()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            commands::saliency_cmd(&cfg, &ckpt, &data, &common.out)?;
        }
        Command::Activity { common, checkpoint } => {
            let cfg = load(&common, None)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let seed = common.seed.unwrap_or(cfg.eval.track_seed);
            commands::activity_cmd(&cfg, &ckpt, seed, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ncp_cli::exit_code(&e) as u8)
        }
    }
}
