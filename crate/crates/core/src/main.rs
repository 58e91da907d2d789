use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bisimkit::config::ExperimentConfig;
use bisimkit::harness;
use bisimkit::Error;

#[derive(Parser)]
#[command(
    name = "bisimkit",
    about = "Bisimulation metrics and bisimulation-based representation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (.toml or .json)
    #[arg(long)]
    config: PathBuf,
    /// Master seed; identical seeds produce byte-identical outputs
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Compute exact bisimulation metrics, partition, and bound checks
    Exact(CommonArgs),
    /// Train an agent and write logs plus a checkpoint
    Train(CommonArgs),
    /// Correlate latent distances with the exact metric (needs a checkpoint)
    EvalCorr(CommonArgs),
    /// Measure latent invariance to distractor changes (needs a checkpoint)
    EvalInv(CommonArgs),
    /// Transfer a frozen encoder to a task variant (needs a checkpoint)
    EvalTransfer(CommonArgs),
}

fn configure_threads() -> Result<(), Error> {
    match std::env::var("BISIMKIT_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(Error::Config(format!("BISIMKIT_THREADS is not valid unicode: {e}"))),
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| Error::Config(format!("BISIMKIT_THREADS must be a positive integer, got {raw:?}")))?;
            if n == 0 {
                return Err(Error::Config("BISIMKIT_THREADS must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))
        }
    }
}

fn run() -> Result<(), Error> {
    configure_threads()?;
    let cli = Cli::parse();
    let (args, f): (&CommonArgs, fn(&ExperimentConfig, u64, &std::path::Path) -> Result<(), Error>) =
        match &cli.command {
            Command::Exact(a) => (a, harness::cmd_exact),
            Command::Train(a) => (a, harness::cmd_train),
            Command::EvalCorr(a) => (a, harness::cmd_eval_correlation),
            Command::EvalInv(a) => (a, harness::cmd_eval_invariance),
            Command::EvalTransfer(a) => (a, harness::cmd_eval_transfer),
        };
    let cfg = ExperimentConfig::load(&args.config)?;
    cfg.validate()?;
    f(&cfg, args.seed, &args.out)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) | Error::NoConvergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
