//! `windgen`: synthetic data, model training, conditional sampling, and
//! evaluation for wind-profile generative models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CommandCtx;
use config::RunConfig;

const BIN_TABLE: &str = "\
Speed bins (m/s), left-closed, last bin clamped above:
  0: [0.00, 2.23)    1: [2.23, 5.36)    2: [5.36, 8.05)    3: [8.05, 15.65+)
Conditions are written DIRECTION:SPEED_BIN, e.g. SW:2.
Directions: N NNE NE ENE E ESE SE SSE S SSW SW WSW W WNW NW NNW";

#[derive(Parser)]
#[command(name = "windgen", version, about = "Conditional generative models for wind profiles", after_help = BIN_TABLE)]
struct Cli {
    /// Base seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all produced files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Thread cap for parallel operations.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV from a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample profiles from a checkpoint for one condition.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition as DIRECTION:SPEED_BIN, e.g. SW:2.
        #[arg(long)]
        condition: String,
        #[arg(short)]
        n: usize,
        /// Rejection-sampling draw budget (mixture checkpoints only).
        #[arg(long, default_value_t = windgen::gmm::DEFAULT_MAX_DRAWS)]
        max_draws: u64,
    },
    /// Evaluate one or more checkpoints against a dataset.
    Eval {
        /// Model artifact; repeat to compare several models.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional config providing [eval] options.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the condition-holdout K-fold grid for the configured model.
    Kfold {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> anyhow::Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config `{}`: {e}", path.display()))?;
    let config = RunConfig::parse(&text)?;
    Ok((config, text))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let argv: Vec<String> = std::env::args().collect();
    let mut ctx = CommandCtx { out_dir: cli.out, seed: cli.seed, config_text: None, argv };

    match &cli.command {
        Command::Synth { config } => {
            let (config, text) = read_config(config)?;
            ctx.config_text = Some(text);
            commands::cmd_synth(&ctx, &config)
        }
        Command::Train { config } => {
            let (config, text) = read_config(config)?;
            ctx.config_text = Some(text);
            commands::cmd_train(&ctx, &config)
        }
        Command::Sample { checkpoint, condition, n, max_draws } => {
            commands::cmd_sample(&ctx, checkpoint, condition, *n, *max_draws)
        }
        Command::Eval { checkpoint, dataset, config } => {
            let parsed = match config {
                Some(path) => {
                    let (config, text) = read_config(path)?;
                    ctx.config_text = Some(text);
                    Some(config)
                }
                None => None,
            };
            commands::cmd_eval(&ctx, checkpoint, dataset, parsed.as_ref())
        }
        Command::Kfold { config } => {
            let (config, text) = read_config(config)?;
            ctx.config_text = Some(text);
            commands::cmd_kfold(&ctx, &config)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
