use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prgp_cli::commands::{cmd_calibrate, cmd_evaluate, cmd_ingest, cmd_report, cmd_synth, cmd_train};
use prgp_cli::{print_error, CliError, Overrides, RunConfig};

/// Physics-regularized Gaussian processes for vehicle trajectories.
#[derive(Parser)]
#[command(name = "prgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a trajectory file (or generate a synthetic scene) into canonical CSV.
    Ingest(Common),
    /// Generate a synthetic platoon and export it.
    Synth(Common),
    /// Calibrate physics baselines.
    Calibrate(Common),
    /// Train the GP and PRGP models.
    Train(Common),
    /// Compare trained models on the held-out vehicles.
    Evaluate(Common),
    /// Render plots from existing evaluation artifacts.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated physics equations, e.g. `Pipes,NN`.
    #[arg(long, value_delimiter = ',')]
    equations: Option<Vec<String>>,
    /// Regularization weight for every equation.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Pseudo-inputs per trajectory.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "test-fraction")]
    test_fraction: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            equations: self.equations.clone(),
            gamma: self.gamma,
            iterations: self.iterations,
            m: self.m,
            lr: self.lr,
            test_fraction: self.test_fraction,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(c) => cmd_ingest(&c.config()?).map(drop),
        Command::Synth(c) => cmd_synth(&c.config()?).map(drop),
        Command::Calibrate(c) => cmd_calibrate(&c.config()?).map(drop),
        Command::Train(c) => cmd_train(&c.config()?).map(drop),
        Command::Evaluate(c) => cmd_evaluate(&c.config()?).map(drop),
        Command::Report(c) => cmd_report(&c.config()?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRGP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            print_error(&e);
            ExitCode::from(e.exit_code())
        }
    }
}
