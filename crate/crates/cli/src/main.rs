use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use pboem_cli::experiment::{run_experiment, simulate, slam_experiment, variance_study};
use pboem_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pboem", version, about = "Particle block online EM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated observation streams.
    Simulate(Common),
    /// Run the configured experiment: traces and aggregate CSVs.
    Run(Common),
    /// Compare particle rules by the variance of one coordinate.
    VarianceStudy(Common),
    /// Run the SLAM experiment: paths, maps and landmark errors.
    Slam(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replications.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(out) = &self.out {
            cfg.experiment.output_dir = out.clone();
        }
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(CliError::Config(pboem_cli::ConfigError {
                    path: None,
                    line: None,
                    message: "--workers must be at least 1".into(),
                }));
            }
            cfg.experiment.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.experiment.master_seed = s;
        }
        Ok(cfg)
    }
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate(c) => {
            let files = simulate(&c.load()?)?;
            info!("wrote {} observation files", files.len());
        }
        Command::Run(c) => {
            let out = run_experiment(&c.load()?)?;
            info!("wrote {} files", out.files.len());
        }
        Command::VarianceStudy(c) => {
            let rows = variance_study(&c.load()?)?;
            info!("wrote variance study over {} blocks", rows.len());
        }
        Command::Slam(c) => {
            let cfg = c.load()?;
            if cfg.experiment.model != pboem_cli::config::ModelId::Slam {
                return Err(CliError::Config(pboem_cli::ConfigError {
                    path: Some(c.config.clone()),
                    line: None,
                    message: "the slam command needs model = \"slam\"".into(),
                }));
            }
            let out = slam_experiment(&cfg)?;
            info!("wrote {} files", out.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
