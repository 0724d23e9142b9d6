//! The `actplan` command-line front end.
//!
//! [`run`] parses arguments, dispatches to a subcommand and writes the report
//! to `out`. Diagnostics go to `err`. The return value is the process exit code.

mod commands;
mod render;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use actplan_core::exact::parse_decimal;
use actplan_core::{Exact, RecomputeStrategy, SelectiveFlops};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const SEED_ENV: &str = "ACTPLAN_SEED";

#[derive(Debug, Parser)]
#[command(name = "actplan", version, about = "Activation memory, FLOPs and parallel layout planning for transformer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Activation, parameter and optimizer memory of the first pipeline stage.
    Memory {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "selective+seq", value_parser = parse_strategy)]
        strategy: RecomputeStrategy,
        #[command(flatten)]
        common: Common,
    },
    /// Model and hardware FLOPs per iteration, MFU and HFU.
    Flops {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "selective+seq", value_parser = parse_strategy)]
        strategy: RecomputeStrategy,
        /// Measured seconds per iteration; enables MFU and HFU.
        #[arg(long, value_parser = parse_time)]
        iter_time: Option<Exact>,
        #[arg(long, value_enum, default_value_t = SelectiveArg::Eq)]
        flops_selective: SelectiveArg,
        #[command(flatten)]
        common: Common,
    },
    /// Per-rank activation memory over one 1F1B iteration.
    PipelineSim {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "selective+seq", value_parser = parse_strategy)]
        strategy: RecomputeStrategy,
        #[command(flatten)]
        common: Common,
    },
    /// Ranked search over layouts and recompute strategies.
    Plan {
        #[command(flatten)]
        source: Source,
        /// Print only the first N candidates.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, value_enum, default_value_t = SelectiveArg::Eq)]
        flops_selective: SelectiveArg,
        #[command(flatten)]
        common: Common,
    },
    /// Numerical checks of the sharded transformer layer and the memory models.
    Verify {
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// JSON config document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: 22b, 175b, 530b or 1t.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Free stage outputs once sent downstream.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    dealloc: Toggle,
    /// Optimizer bytes per parameter on top of the fp16 weights.
    #[arg(long)]
    optimizer_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectiveArg {
    Eq,
    Text,
}

impl From<SelectiveArg> for SelectiveFlops {
    fn from(arg: SelectiveArg) -> Self {
        match arg {
            SelectiveArg::Eq => SelectiveFlops::Equation,
            SelectiveArg::Text => SelectiveFlops::Text,
        }
    }
}

fn parse_strategy(text: &str) -> Result<RecomputeStrategy, String> {
    text.parse().map_err(|e: actplan_core::model::StrategyParseError| e.to_string())
}

fn parse_time(text: &str) -> Result<Exact, String> {
    parse_decimal(text).map_err(|e| e.0)
}

fn seed_from_env() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(actplan_seqpar::suite::DEFAULT_SEED),
        Err(e) => Err(CliError::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Memory { source, strategy, common } => {
            let ctx = commands::Context::load(&source, &common)?;
            commands::memory(&ctx, &strategy, common.format, out)
        }
        Command::Flops { source, strategy, iter_time, flops_selective, common } => {
            let ctx = commands::Context::load(&source, &common)?;
            commands::flops(&ctx, &strategy, iter_time, flops_selective.into(), common.format, out)
        }
        Command::PipelineSim { source, strategy, common } => {
            let ctx = commands::Context::load(&source, &common)?;
            commands::pipeline_sim(&ctx, &strategy, common.format, out)
        }
        Command::Plan { source, top, flops_selective, common } => {
            let ctx = commands::Context::load(&source, &common)?;
            commands::plan(&ctx, top, flops_selective.into(), common.format, out)
        }
        Command::Verify { format } => commands::verify(seed_from_env()?, format, out),
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
