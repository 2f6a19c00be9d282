//! `ecl` command line: build long-tailed datasets, train the collaborative
//! multi-expert model, evaluate checkpoints, and scan weight-perturbation
//! landscapes.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecl_core::cli::{cmd_eval, cmd_landscape, cmd_make_dataset, cmd_train, EvalOptions, LandscapeOptions};
use ecl_core::collab::PredictMode;
use ecl_core::config::ExperimentConfig;
use ecl_core::error::{EclError, Result};

#[derive(Parser)]
#[command(name = "ecl", version, about = "Collaborative multi-expert learning for long-tailed recognition")]
struct Cli {
    /// Experiment config file (key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override output.dir from the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the experiment seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Evaluate a single expert by index
    #[arg(long, conflicts_with = "ensemble")]
    expert: Option<usize>,
    /// Evaluate the logit-averaged ensemble (default)
    #[arg(long)]
    ensemble: bool,
    /// Post-hoc prior-correction strength
    #[arg(long)]
    posthoc_tau: Option<f64>,
    /// Checkpoint file (default <run dir>/ckpt.bin)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset file (default from config)
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl ModelFlags {
    fn mode(&self) -> PredictMode {
        match self.expert {
            Some(k) => PredictMode::Single(k),
            None => PredictMode::Ensemble,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic long-tailed dataset
    MakeDataset,
    /// Train the multi-expert model on the dataset
    Train,
    /// Evaluate a checkpoint on the balanced test split
    Eval {
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Loss/accuracy landscape under weight perturbation
    Landscape {
        #[command(flatten)]
        flags: ModelFlags,
        /// Comma-separated ascending noise levels
        #[arg(long)]
        levels: Option<String>,
        /// Perturbation draws per level
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| EclError::Config("missing --config PATH".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_levels(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| EclError::Config(format!("bad noise level '{s}'")))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::MakeDataset => cmd_make_dataset(&config),
        Command::Train => cmd_train(&config),
        Command::Eval { flags } => cmd_eval(
            &config,
            &EvalOptions {
                mode: flags.mode(),
                posthoc_tau: flags.posthoc_tau,
                checkpoint: flags.ckpt.clone(),
                dataset: flags.dataset.clone(),
            },
        ),
        Command::Landscape { flags, levels, repeats } => {
            let levels = levels.as_deref().map(parse_levels).transpose()?;
            cmd_landscape(
                &config,
                &LandscapeOptions {
                    mode: flags.mode(),
                    posthoc_tau: flags.posthoc_tau,
                    levels,
                    repeats: *repeats,
                    checkpoint: flags.ckpt.clone(),
                    dataset: flags.dataset.clone(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
