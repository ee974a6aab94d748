mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "visfit", version, about = "Fit a parametric body model to dense grid observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent problems.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to one or more observation files.
    Fit(commands::FitArgs),
    /// Visibility labels and pixel correspondences from an IUV image.
    PseudoGt(commands::PseudoGtArgs),
    /// Generate synthetic problems with hidden ground truth.
    Synth(commands::SynthArgs),
    /// Compare fitted bodies with ground truth.
    Eval(commands::EvalArgs),
    /// Write the posed mesh of a parameter file as OBJ.
    ExportObj(commands::ExportObjArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, exit: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new("invalid_input", 2, message)
    }
}

impl From<visfit_core::Error> for CliError {
    fn from(e: visfit_core::Error) -> Self {
        let exit = if e.is_numerical() { 3 } else { 2 };
        Self::new(e.code(), exit, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message = serde_json::to_string(&self.message).unwrap_or_default();
        write!(f, "error_code={} exit={} message={}", self.code, self.exit, message)
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("VISFIT_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new("usage", 2, first));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::PseudoGt(a) => commands::pseudo_gt(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportObj(a) => commands::export_obj(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{e}");
            ExitCode::from(e.exit)
        }
    }
}
