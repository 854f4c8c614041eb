//! `vibropsi`: simulate, run, analyze and serve.
//!
//! Exit codes: 0 success, 1 validation, 2 runtime.

mod analyze;
mod interactive;
mod simulate;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vibropsi_service::{FileConfig, ServiceConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, flags, too few records.
    Validation(String),
    /// Failure while doing the work: I/O, apparatus, interrupted run.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "vibropsi", version, about = "Adaptive vibrotactile two-point discrimination sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run seeded sessions against a simulated observer and rig.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Base seed; run i uses seed + i. Defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record and summary directory. Defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Interactive session at the terminal, with an optional practice block.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        no_practice: bool,
    },
    /// Cohort curve, thresholds and reference comparison from saved records.
    Analyze {
        /// Glob matching record files, e.g. "data/**/*.json".
        #[arg(long)]
        records: String,
        /// Reference curve CSV (separation_mm,recognition_rate). Uses the
        /// built-in synthetic fixture when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = vibropsi_core::stats::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Serve the HTTP/JSON API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Wire name of a phase, e.g. `EXCLUDED`.
pub fn phase_name(p: vibropsi_core::protocol::Phase) -> String {
    serde_json::to_value(p).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub fn load_config(path: &Path) -> CliResult<FileConfig> {
    FileConfig::load(path).map_err(|e| CliError::Validation(e.to_string()))
}

fn service_config(config: Option<&Path>, data_dir: Option<PathBuf>, bind: Option<String>) -> CliResult<ServiceConfig> {
    let mut service = match config {
        Some(p) => load_config(p)?.service,
        None => ServiceConfig::default(),
    };
    service.apply_env().map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(d) = data_dir {
        service.data_dir = d;
    }
    if let Some(b) = bind {
        service.bind = b;
    }
    Ok(service)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, count, seed, out, jobs } => {
            simulate::run(&simulate::Args { config, count, seed, out, jobs })
        }
        Command::Run { config, seed, data_dir, no_practice } => {
            interactive::run(&config, seed, data_dir, !no_practice)
        }
        Command::Analyze { records, reference, out, alpha } => {
            analyze::run(&records, reference.as_deref(), &out, alpha)
        }
        Command::Serve { config, data_dir, bind } => {
            let service = service_config(config.as_deref(), data_dir, bind)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(vibropsi_service::serve(service)).map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors are validation failures; --help and --version are not.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
