//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecac::config::TrainConfig;
use ecac::error::Result;
use ecac::{charts, trainer};

#[derive(Parser)]
#[command(
    name = "ecac",
    about = "Actor-critic trainer for continuous control with twin clipped double-Q critics, \
             a KL-limited Gaussian policy, and value-error diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key-value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,

    /// Per-key overrides, e.g. --set env=pendulum --set lr=3e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write metrics, checkpoints, and the
    /// effective config into the output directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired runs with the KL limitation on and off (same seed), written
    /// to <out>/kl_on and <out>/kl_off
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic-mean-action rollouts from a checkpoint
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file to load
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes to run
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// Environment override (defaults to the checkpoint's)
        #[arg(long)]
        env: Option<String>,
        /// Optional directory for an evaluation report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render return/KL/error charts from metrics files
    RenderCharts {
        #[command(flatten)]
        config: ConfigArgs,
        /// Metrics CSV files; each becomes a labeled series
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output directory for the SVG files
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = config.resolve()?;
            let outcome = trainer::train(&cfg, &out)?;
            println!(
                "trained {} steps on {}; metrics at {}",
                outcome.steps_run,
                cfg.env,
                outcome.metrics_path.display()
            );
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Ablate { config, out } => {
            let cfg = config.resolve()?;
            let (on, off) = trainer::ablate(&cfg, &out)?;
            println!("kl_on  metrics: {}", on.metrics_path.display());
            println!("kl_off metrics: {}", off.metrics_path.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            episodes,
            env,
            out,
        } => {
            let seed = config.seed.unwrap_or(0);
            let stats =
                trainer::evaluate_checkpoint(&checkpoint, env.as_deref(), episodes, seed)?;
            let report = format!(
                "episodes = {}\nmean = {}\nmin = {}\nmax = {}\nstd = {}\nreturns = {:?}\n",
                stats.returns.len(),
                stats.mean,
                stats.min,
                stats.max,
                stats.std,
                stats.returns
            );
            print!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("evaluation.txt"), report)?;
            }
        }
        Command::RenderCharts { metrics, out, .. } => {
            let files = charts::render_charts(&metrics, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

