use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icvlab::{load_config, run_stage, validate_config, CliError, ExtractKind, Overrides, Stage};

/// In-context vector workbench on a miniature transformer.
#[derive(Parser)]
#[command(name = "icvlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides `seeds.root`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the model on the ICL stream.
    Pretrain(Common),
    /// Train a LIVE bundle against the frozen model.
    TrainLive(Common),
    /// Extract a non-learnable vector.
    Extract {
        kind: ExtractKind,
        #[command(flatten)]
        common: Common,
    },
    /// Train the low-rank output-head baseline.
    TrainLora(Common),
    /// Score `method` on the evaluation split.
    Eval(Common),
    /// Run the configured sweep.
    Sweep(Common),
    /// Run the configured analysis.
    Analyze(Common),
    /// Merge bundles into a general LIVE and score it.
    Merge(Common),
    /// Check a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ICVLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(vec![format!("ICVLAB_THREADS must be a positive integer, got {v:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(vec![format!("ICVLAB_THREADS: {e}")]))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let (stage, common) = match command {
        Command::Validate { config } => {
            validate_config(&config).map_err(CliError::Config)?;
            println!("ok");
            return Ok(());
        }
        Command::Pretrain(c) => (Stage::Pretrain, c),
        Command::TrainLive(c) => (Stage::TrainLive, c),
        Command::Extract { kind, common } => (Stage::Extract(kind), common),
        Command::TrainLora(c) => (Stage::TrainLora, c),
        Command::Eval(c) => (Stage::Eval, c),
        Command::Sweep(c) => (Stage::Sweep, c),
        Command::Analyze(c) => (Stage::Analyze, c),
        Command::Merge(c) => (Stage::Merge, c),
    };
    set_threads()?;
    let cfg = load_config(
        &common.config,
        &Overrides {
            seed: common.seed,
            out: common.out,
        },
    )?;
    let manifest = run_stage(stage, cfg)?;
    for (k, v) in &manifest.metrics {
        println!("{k}\t{v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("icvlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
