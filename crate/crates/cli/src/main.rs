mod commands;
mod config;
mod error;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

/// Post-training quantization experiments on a toy video diffusion transformer.
///
/// Every command reads its inputs from and writes its outputs to the output
/// directory, so the usual order is trace, calibrate, sensitivity, allocate,
/// quantize, eval, report.
#[derive(Parser)]
#[command(name = "dtq", version)]
struct Cli {
    /// TOML config; defaults apply to everything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sampler seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight and activation bits as `W4A8`, overriding `[quant]`.
    #[arg(long, global = true)]
    bits: Option<String>,
    /// Average weight-bit budget, overriding `plan.budget`.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Output directory, overriding `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the float model and archive every linear-layer input.
    Trace,
    /// Calibrate balancing and activation parameters from an archive.
    Calibrate {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Quantize the weights and write a packed checkpoint.
    Quantize {
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Mixed-precision plan to apply; defaults to `plan.path` if set.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Score every (layer, timestep range) cell at the low bit-width.
    Sensitivity {
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Allocate per-cell weight bits under the budget.
    Allocate {
        #[arg(long)]
        records: Option<PathBuf>,
        /// Rank cells by final-output MSE instead of the decoupled metrics.
        #[arg(long)]
        mse_baseline: bool,
    },
    /// Compare a quantized model against the float one.
    Eval {
        #[arg(long, conflicts_with_all = ["plan", "passthrough"])]
        checkpoint: Option<PathBuf>,
        /// Evaluate a plan applied to the calibration without building a checkpoint.
        #[arg(long, conflicts_with = "passthrough")]
        plan: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Evaluate the float model against itself.
        #[arg(long)]
        passthrough: bool,
    },
    /// Collect statistics and earlier outputs into text, JSON and SVG.
    Report {
        /// Directory holding earlier outputs; defaults to the output directory.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DTQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("DTQ_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("DTQ_THREADS: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let overrides = Overrides {
        seed: cli.seed,
        bits: cli.bits,
        budget: cli.budget,
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    log::info!("output directory {}", cfg.out.display());
    match cli.command {
        Command::Trace => commands::trace(&cfg),
        Command::Calibrate { traces } => commands::calibrate(&cfg, traces),
        Command::Quantize { calibration, plan } => commands::quantize_cmd(&cfg, calibration, plan),
        Command::Sensitivity { calibration } => commands::sensitivity(&cfg, calibration),
        Command::Allocate { records, mse_baseline } => commands::allocate(&cfg, records, mse_baseline),
        Command::Eval {
            checkpoint,
            plan,
            calibration,
            passthrough,
        } => commands::eval(
            &cfg,
            commands::EvalSource {
                checkpoint,
                plan,
                calibration,
                passthrough,
            },
        ),
        Command::Report { inputs } => {
            let dir = inputs.unwrap_or_else(|| cfg.out.clone());
            let r = report::build(&cfg, &dir)?;
            for p in report::write_all(&r, &cfg.out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
