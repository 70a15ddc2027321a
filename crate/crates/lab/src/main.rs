//! `frge-lab`: batch front end for the frge-core library.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 validation failure (bad config,
//! failed check, mismatched report inputs), 3 numerical failure.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use frge_core::convex::ConvexError;
use frge_core::flow::{FlowError, InitMode};
use frge_core::functionals::FunctionalError;
use frge_core::model::ModelError;
use frge_core::regulator::RegulatorError;
use std::path::PathBuf;
use std::process::ExitCode;

use config::Representation;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl LabError {
    pub fn code(&self) -> u8 {
        match self {
            LabError::Io(_) => 1,
            LabError::Validation(_) => 2,
            LabError::Numerical(_) => 3,
        }
    }
}

impl From<FunctionalError> for LabError {
    fn from(e: FunctionalError) -> Self {
        match e {
            FunctionalError::TooManyModes { .. } => LabError::Validation(e.to_string()),
            _ => LabError::Numerical(e.to_string()),
        }
    }
}

impl From<FlowError> for LabError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Invalid(_) => LabError::Validation(e.to_string()),
            FlowError::Functional(f) => f.into(),
            _ => LabError::Numerical(e.to_string()),
        }
    }
}

impl From<ConvexError> for LabError {
    fn from(e: ConvexError) -> Self {
        match e {
            ConvexError::Functional(f) => f.into(),
            ConvexError::EmptyEpigraphWindow { .. } => LabError::Numerical(e.to_string()),
            _ => LabError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for LabError {
    fn from(e: ModelError) -> Self {
        LabError::Validation(e.to_string())
    }
}

impl From<RegulatorError> for LabError {
    fn from(e: RegulatorError) -> Self {
        LabError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "frge-lab", version, about = "Exact and flowed effective average actions for small scalar theories")]
struct Cli {
    /// JSON run configuration; defaults to the single-mode quartic fixture.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (falls back to FRGE_LAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the admissibility conditions of one or more regulators.
    ValidateRegulator {
        /// May be repeated.
        #[arg(long = "regulator")]
        regulators: Vec<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact effective average action on the field grid at each k.
    Exact {
        #[arg(long)]
        regulator: Option<String>,
        /// Comma-separated scales.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        k: Vec<f64>,
    },
    /// Integrate the flow equation and compare with the exact action.
    Flow {
        #[arg(long)]
        regulator: Option<String>,
        #[arg(long)]
        init: Option<InitMode>,
        #[arg(long)]
        kuv: Option<f64>,
        #[arg(long)]
        kend: Option<f64>,
        #[arg(long, value_enum, alias = "representation")]
        rep: Option<Representation>,
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<f64>,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
    },
    /// Check the unsubtracted flow equation at probe points.
    FrgeCheck {
        #[arg(long)]
        regulator: Option<String>,
    },
    /// Convergence diagnostics along a sequence of regularisations.
    Converge {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Merge manifests into a summary table.
    Report {
        /// Directories holding manifests; defaults to the output directory.
        inputs: Vec<PathBuf>,
        /// Merge even when config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, LabError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FRGE_LAB_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::Validation(format!("FRGE_LAB_THREADS must be a positive integer, got `{v}`"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), LabError> {
    let threads = thread_count(cli.threads)?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(LabError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Io(e.to_string()))?;
    }
    if let Command::Report { inputs, force } = &cli.command {
        let inputs = if inputs.is_empty() { vec![cli.out.clone()] } else { inputs.clone() };
        return commands::report(&cli.out, &inputs, *force);
    }
    let mut config = config::LabConfig::load(cli.config.as_deref())?;
    let name = match cli.command {
        Command::ValidateRegulator { regulators, samples, seed } => {
            if !regulators.is_empty() {
                config.regulator_check.regulators = regulators;
            }
            if let Some(s) = samples {
                config.regulator_check.samples = s;
            }
            if let Some(s) = seed {
                config.regulator_check.seed = s;
            }
            "validate-regulator"
        }
        Command::Exact { regulator, k } => {
            if let Some(r) = regulator {
                config.regulator = r;
            }
            if !k.is_empty() {
                config.exact.ks = k;
            }
            "exact"
        }
        Command::Flow { regulator, init, kuv, kend, rep, checkpoints, rtol, atol } => {
            if let Some(r) = regulator {
                config.regulator = r;
            }
            if let Some(i) = init {
                config.flow.init = i;
            }
            if let Some(k) = kuv {
                config.flow.k_uv = k;
            }
            if let Some(k) = kend {
                config.flow.k_to = k;
            }
            if let Some(r) = rep {
                config.flow.representation = r;
            }
            if let Some(t) = rtol {
                config.flow.rtol = t;
            }
            if let Some(t) = atol {
                config.flow.atol = t;
            }
            if !checkpoints.is_empty() {
                config.flow.checkpoints = checkpoints;
            }
            "flow"
        }
        Command::FrgeCheck { regulator } => {
            if let Some(r) = regulator {
                config.regulator = r;
            }
            "frge-check"
        }
        Command::Converge { seed, samples } => {
            if let Some(s) = seed {
                config.converge.seed = s;
            }
            if let Some(s) = samples {
                config.converge.samples = s;
            }
            "converge"
        }
        Command::Report { .. } => unreachable!("handled above"),
    };
    let threads = threads.unwrap_or_else(rayon::current_num_threads);
    commands::execute(name, &config, &cli.out, threads)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("frge-lab: {e}");
            ExitCode::from(e.code())
        }
    }
}
