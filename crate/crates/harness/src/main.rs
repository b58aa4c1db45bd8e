use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedq_harness::{run_experiment, ExperimentConfig, ExperimentKind, HarnessError};

#[derive(Parser)]
#[command(name = "fedq", version, about = "Federated Q-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One setting, repeated.
    Run(Common),
    /// One curve per synchronization period.
    SweepE(Common),
    /// One curve per stepsize schedule.
    SweepStepsize(Common),
    /// Two-phase stepsizes against the single-phase baseline.
    TwoPhase(Common),
    /// Simulation against the closed form on the two-state construction.
    LowerBound(Common),
    /// Numeric self-checks and verified runs.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; fields not given take the command's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// T = 2000, 3 repeats, gamma = 0.9 (values in --config still win).
    #[arg(long)]
    fast: bool,
    #[arg(long)]
    threads: Option<usize>,
}

fn resolve(kind: ExperimentKind, args: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::defaults(kind);
    if args.fast {
        cfg.apply_fast();
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        cfg = cfg.overlay(&doc)?;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threads == Some(0) {
        return Err(HarnessError::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Run(a) => (ExperimentKind::SingleRun, a),
        Command::SweepE(a) => (ExperimentKind::ESweep, a),
        Command::SweepStepsize(a) => (ExperimentKind::StepsizeSweep, a),
        Command::TwoPhase(a) => (ExperimentKind::TwoPhase, a),
        Command::LowerBound(a) => (ExperimentKind::LowerBoundCheck, a),
        Command::Verify(a) => (ExperimentKind::VerifyAll, a),
    };
    let result = resolve(kind, args).and_then(|cfg| run_experiment(&cfg, args.threads).map(|o| (cfg, o)));
    match result {
        Ok((cfg, outcome)) => {
            println!(
                "{}: {} curve(s), {} repeat(s) -> {}",
                kind.as_str(),
                outcome.curves.len(),
                outcome.repeats.len(),
                cfg.output_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::FAILURE
        }
    }
}
