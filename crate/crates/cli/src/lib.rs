//! Command-line front end: configuration, registries, experiment commands and
//! report files.
//!
//! Exit codes: `0` every verdict passed, `1` a verdict failed, `2` invalid
//! configuration, `3` runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

pub mod commands;
pub mod config;
pub mod registry;
pub mod report;

pub use config::ExperimentConfig;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<measureflow_core::Error> for CliError {
    fn from(e: measureflow_core::Error) -> Self {
        use measureflow_core::Error as E;
        match e {
            E::InvalidParameter { .. } | E::EnumerationGuard { .. } | E::Unsupported(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Qcov,
    ItoVerify,
    Control,
    DerivativeCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Qcov => "qcov",
            Command::ItoVerify => "ito-verify",
            Command::Control => "control",
            Command::DerivativeCheck => "derivative-check",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "measureflow", version, about = "Measure-flow calculus and McKean-Vlasov control experiments")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the configured `out`, else `measureflow-out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// What a completed command reports back.
#[derive(Debug, Clone)]
pub struct Completed {
    pub pass: bool,
    pub scenario: String,
    pub out: PathBuf,
}

/// Load the configuration, apply overrides, run the command and write its
/// report. Returns the process exit code.
pub fn run(args: &Args) -> i32 {
    match execute(args) {
        Ok(done) => {
            let verdict = if done.pass { "PASS" } else { "FAIL" };
            println!("{} {}: {verdict} (reports in {})", args.command.name(), done.scenario, done.out.display());
            if done.pass {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("measureflow {}: {e}", args.command.name());
            e.exit_code()
        }
    }
}

/// [`run`] without console output.
pub fn execute(args: &Args) -> Result<Completed, CliError> {
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let mut cfg = ExperimentConfig::read(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate_common()?;
    let out = output_dir(args, &cfg);
    let work = || commands::dispatch(args.command, &cfg);
    let outcome = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot start thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    outcome.write(&out, args.command, &cfg)?;
    Ok(Completed {
        pass: outcome.pass,
        scenario: cfg.scenario,
        out,
    })
}

fn output_dir(args: &Args, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("measureflow-out").to_path_buf())
}
