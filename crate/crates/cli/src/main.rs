//! `retain`: merge checkpoints, analyze finetuning paths, and run the toy lab.
//!
//! Exit codes: 0 success, 1 I/O, 2 schema mismatch or too few checkpoints,
//! 3 malformed config or usage, 4 non-finite training loss.

mod analyze;
mod error;
mod lab;
mod manifest;
mod merge;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use error::{CliError, CliResult};
use retain_core::toylab::LabConfig;

#[derive(Debug, Parser)]
#[command(name = "retain", version, about = "Checkpoint merging, finetuning-path analysis and a toy BC lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Interpolate pretrained and finetuned checkpoints.
    Merge(merge::MergeArgs),
    /// Cosine, PCA, Gram-spectrum or overlay analysis of a checkpoint trajectory.
    Analyze(analyze::AnalyzeArgs),
    /// Choose a merge coefficient on the validation shift and report the winner.
    Sweep(sweep::SweepArgs),
    /// Toy behavioral-cloning lab.
    Lab {
        #[command(subcommand)]
        command: lab::LabCommand,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::exit::CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Merge(args) => merge::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::Sweep(args) => sweep::run(args),
        Command::Lab { command } => lab::run(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Loads a lab config, applying the `RETAIN_SEED` override.
pub fn load_lab_config(path: &Path) -> CliResult<LabConfig> {
    let mut cfg: LabConfig = read_json(path)?;
    if let Ok(seed) = std::env::var("RETAIN_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("RETAIN_SEED is not an unsigned integer: {seed:?}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `"0.25,0.5,0.75"`.
pub fn parse_alpha_list(s: &str) -> CliResult<Vec<f64>> {
    let alphas = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| CliError::usage(format!("not a number: {t:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if alphas.is_empty() {
        return Err(CliError::usage("the coefficient list is empty"));
    }
    Ok(alphas)
}

pub fn ensure_dir(path: &PathBuf) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
