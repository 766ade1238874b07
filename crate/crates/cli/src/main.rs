use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "lipnet", version, about = "Lipschitz-regularized training and noise-robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single seed (overrides `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to evaluate or audit.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Run the synthetic distortion-radius check (guarantee).
    #[arg(long, global = true)]
    synthetic: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train one model and write its checkpoint and training record.
    Train,
    /// Evaluate a checkpoint over the configured noise levels.
    Sweep,
    /// Train and sweep every hyperparameter cell.
    Grid,
    /// Finite-difference sensitivity of noisy accuracy to each hyperparameter.
    Sensitivity,
    /// Distortion radius per L_n, with optional audits.
    Guarantee,
    /// Accuracy against the fraction of training data used.
    RatioStudy,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Grid => "grid",
            Command::Sensitivity => "sensitivity",
            Command::Guarantee => "guarantee",
            Command::RatioStudy => "ratio-study",
        }
    }
}

/// A failed command: usage errors exit with 2, run failures with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<lipnet::Error> for Failure {
    fn from(e: lipnet::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<lipnet::ModelError> for Failure {
    fn from(e: lipnet::ModelError) -> Self {
        Failure::Run(e.into())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error kind=usage message=\"{}\"", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error kind=usage command={} message=\"{}\"", cli.command.name(), one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!(
                "error kind=run command={} message=\"{}\"",
                cli.command.name(),
                one_line(&format!("{e:#}"))
            );
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("runs").join(cli.command.name()));
    }
    if cfg.workers == 0 {
        return Err(Failure::Usage("workers must be at least 1".into()));
    }
    if cli.checkpoint.is_some() && !matches!(cli.command, Command::Sweep | Command::Guarantee) {
        return Err(Failure::Usage(format!("--checkpoint is not used by {}", cli.command.name())));
    }
    if cli.synthetic && cli.command != Command::Guarantee {
        return Err(Failure::Usage("--synthetic only applies to guarantee".into()));
    }
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Sweep => commands::sweep(&cfg, cli.checkpoint.as_deref()),
        Command::Grid => commands::grid(&cfg),
        Command::Sensitivity => commands::sensitivity(&cfg),
        Command::Guarantee => commands::guarantee(&cfg, cli.checkpoint.as_deref(), cli.synthetic),
        Command::RatioStudy => commands::ratio_study(&cfg),
    }
}
