//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{resolve_seed, CalibConfig, SEED_ENV};
use crate::error::Result;
use crate::workflow::{self, Context, VARIANTS};

#[derive(Debug, Parser)]
#[command(name = "drift-ptq", version, about = "Drift-aware post-training quantization of a diffusion action policy")]
pub struct Cli {
    /// `key = value` file overriding the default calibration config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; falls back to $DRIFT_PTQ_SEED, then the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every artifact.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out_dir: PathBuf,
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write scripted-controller trajectories as JSONL.
    GenerateData,
    /// Stage 1: fit the FP policy head, profile drift and layer sensitivity.
    Profile,
    /// Stage 2: uniform W4A8 with folded interface compensation.
    Compensate,
    /// Stage 3: drift-aware bit-width map.
    Allocate,
    /// Stage 3: final model per the bit-width map, plus reference variants.
    Quantize,
    /// Paired closed-loop rollouts of variants against the FP policy.
    Evaluate {
        /// Comma-separated variants among fp, w4, w4csrc, daptq.
        #[arg(long, value_delimiter = ',', default_values_t = VARIANTS.iter().map(|s| s.to_string()).collect::<Vec<_>>())]
        variants: Vec<String>,
        /// Number of evaluation seeds (defaults to `eval_seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Assemble and validate the JSON report.
    Report,
    /// Every stage, evaluation and the report.
    RunAll,
}

fn context(cli: &Cli) -> Result<Context> {
    let (mut config, overrides) = match &cli.config {
        Some(p) => CalibConfig::load(p)?,
        None => (CalibConfig::default(), Vec::new()),
    };
    let env = std::env::var(SEED_ENV).ok();
    config.seed = resolve_seed(cli.seed, env.as_deref(), config.seed)?;
    Context::new(config, overrides, &cli.out_dir)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut ctx = context(cli)?;
    match &cli.command {
        Command::GenerateData => workflow::generate_data(&mut ctx)?,
        Command::Profile => workflow::profile(&mut ctx)?,
        Command::Compensate => workflow::compensate(&mut ctx)?,
        Command::Allocate => workflow::allocate_step(&mut ctx)?,
        Command::Quantize => workflow::quantize(&mut ctx)?,
        Command::Evaluate { variants, seeds } => {
            workflow::evaluate(&mut ctx, variants, *seeds)?;
        }
        Command::Report => {
            workflow::report(&mut ctx)?;
        }
        Command::RunAll => {
            workflow::run_all(&mut ctx)?;
            log::info!("report written to {}", ctx.ws.report().display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs, and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
