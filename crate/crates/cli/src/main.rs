//! `milpdl` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::CommandContext;
use config::RawConfig;

#[derive(Parser, Debug)]
#[command(
    name = "milpdl",
    version,
    about = "Attention MIL with progressive instance dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Repeated k-fold cross-validation, then a final fit saved to model.path
    Train(Args),
    /// Evaluate a saved model on the configured dataset
    Eval(Args),
    /// Compare no regularizer, four dropout baselines and PDL
    CompareDropouts(Args),
    /// Fixed versus progressive PDL schedule
    SchedulerAblation(Args),
    /// Schedule-kind x rate-kind interpolation grid
    SweepInterpolation(Args),
    /// Per-instance attention of a saved model as CSV
    ExportAttention(Args),
    /// Write the configured dataset as bag CSV
    ExportData(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// key=value config file; flags override its entries
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides such as --pdl.p_max=0.45 or --train.epochs 40
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn context(name: &'static str, args: &Args) -> Result<CommandContext> {
    let mut raw = RawConfig::defaults();
    if let Some(path) = &args.config {
        raw.merge_file(path)?;
    }
    raw.merge_flags(&args.overrides)?;
    let settings = raw.resolve()?;
    Ok(CommandContext {
        raw,
        settings,
        command: name,
    })
}

type Handler = fn(&CommandContext) -> Result<()>;

fn run(cli: Cli) -> Result<()> {
    let (name, args, f): (&'static str, &Args, Handler) = match &cli.command {
        Command::Train(a) => ("train", a, commands::cmd_train),
        Command::Eval(a) => ("eval", a, commands::cmd_eval),
        Command::CompareDropouts(a) => ("compare-dropouts", a, commands::cmd_compare_dropouts),
        Command::SchedulerAblation(a) => {
            ("scheduler-ablation", a, commands::cmd_scheduler_ablation)
        }
        Command::SweepInterpolation(a) => {
            ("sweep-interpolation", a, commands::cmd_sweep_interpolation)
        }
        Command::ExportAttention(a) => ("export-attention", a, commands::cmd_export_attention),
        Command::ExportData(a) => ("export-data", a, commands::cmd_export_data),
    };
    f(&context(name, args)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
