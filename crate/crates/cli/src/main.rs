use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stm_cli::{commands, parse_config, CliError};

#[derive(Parser)]
#[command(name = "stm", version, about = "Dataset distillation by self-adaptive trajectory matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Keep the most confident images per class and split train/test.
    Curate(RunArgs),
    /// Render the synthetic 9-class image set.
    GenData(RunArgs),
    /// Train teacher networks and save their per-epoch trajectories.
    Teacher(RunArgs),
    /// Distill a synthetic set by matching teacher trajectories.
    Distill(RunArgs),
    /// Score a distilled checkpoint against random (and full) baselines.
    Eval(RunArgs),
    /// Score a stratified random subset.
    Baseline(RunArgs),
    /// Write the distilled images as PNG/PPM rows and a grid.
    ExportImages(RunArgs),
    /// Print and save a checkpoint's history and expansions.
    ShowHistory(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file (a run manifest is also accepted).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, f): (&RunArgs, fn(&stm_cli::RunConfig) -> Result<PathBuf, CliError>) = match &cli.cmd {
        Cmd::Curate(a) => (a, commands::curate),
        Cmd::GenData(a) => (a, commands::gen_data),
        Cmd::Teacher(a) => (a, commands::teacher),
        Cmd::Distill(a) => (a, commands::distill),
        Cmd::Eval(a) => (a, commands::eval),
        Cmd::Baseline(a) => (a, commands::baseline),
        Cmd::ExportImages(a) => (a, commands::export_images),
        Cmd::ShowHistory(a) => (a, commands::show_history),
    };
    let cfg = parse_config(args.config.as_deref(), &args.set)?;
    f(&cfg)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new("usage", first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
