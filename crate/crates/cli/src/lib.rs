//! `vos-lab`: generate toy data, train, score, evaluate and render
//! uncertainty surfaces from a single flat config file.
//!
//! ```text
//! vos-lab <command> [--config <path>] [--<key> <value>]...
//! ```
//!
//! Overrides name a config key either in full (`--train.beta 0`) or by any
//! unambiguous dotted suffix (`--beta 0`). Exit codes: 0 on success, 1 for
//! usage or configuration errors, 2 for runtime failures.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use config::Config;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vos-lab", version, about = "Virtual outlier synthesis experiments on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CommandKind {
    GenerateData,
    Train,
    Score,
    Eval,
    PlotUncertainty,
    ShowConfig,
}

#[derive(Debug, clap::Args)]
struct CommandArgs {
    /// Config file; keys it omits keep their defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` pairs applied after the config file
    #[arg(value_name = "OVERRIDES", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train.csv, val.csv and ood.csv into data.dir
    GenerateData(CommandArgs),
    /// Train on data.dir/train.csv; writes a checkpoint and a loss log
    Train(CommandArgs),
    /// Score a point file with a checkpoint
    Score(CommandArgs),
    /// Detection metrics from an ID and an OOD score dump
    Eval(CommandArgs),
    /// Render the ID score over a grid as a PGM heatmap
    PlotUncertainty(CommandArgs),
    /// Print the effective configuration
    ShowConfig(CommandArgs),
}

impl Command {
    fn split(self) -> (CommandKind, CommandArgs) {
        match self {
            Command::GenerateData(a) => (CommandKind::GenerateData, a),
            Command::Train(a) => (CommandKind::Train, a),
            Command::Score(a) => (CommandKind::Score, a),
            Command::Eval(a) => (CommandKind::Eval, a),
            Command::PlotUncertainty(a) => (CommandKind::PlotUncertainty, a),
            Command::ShowConfig(a) => (CommandKind::ShowConfig, a),
        }
    }
}

impl CommandKind {
    /// Config section that wins ambiguous override suffixes.
    fn section(self) -> Option<&'static str> {
        match self {
            CommandKind::GenerateData => Some("data"),
            CommandKind::Train => Some("train"),
            CommandKind::Score => Some("score"),
            CommandKind::Eval => Some("eval"),
            CommandKind::PlotUncertainty => Some("plot"),
            CommandKind::ShowConfig => None,
        }
    }
}

fn apply_overrides(config: &mut Config, args: &[String], section: Option<&str>) -> Result<(), CliError> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument {arg:?}; overrides look like --key value")))?;
        let (name, value) = match name.split_once('=') {
            Some((n, v)) => (n, v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("missing value for --{name}")))?;
                (name, v.clone())
            }
        };
        if name == "config" {
            return Err(CliError::Usage("--config must come before any override".into()));
        }
        config.set(name, &value, section)?;
    }
    Ok(())
}

fn execute(kind: CommandKind, config: &Config) -> Result<String, CliError> {
    match kind {
        CommandKind::GenerateData => commands::generate_data(config),
        CommandKind::Train => commands::train(config),
        CommandKind::Score => commands::score(config),
        CommandKind::Eval => commands::eval(config),
        CommandKind::PlotUncertainty => commands::plot_uncertainty(config),
        CommandKind::ShowConfig => Ok(config.render()),
    }
}

/// Parse `args` (program name first) and run the command, returning the
/// text to print on success.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => return Ok(e.to_string()),
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    let (kind, args) = cli.command.split();
    let mut config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    apply_overrides(&mut config, &args.overrides, kind.section())?;
    execute(kind, &config)
}

/// Entry point used by the binary: prints output or the error and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("vos-lab: {e}");
            e.exit_code()
        }
    }
}
