//! Command-line front end for compound-form operators.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{RunConfig, Setup};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Failed = 1,
    Usage = 2,
    BlowUp = 3,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("{0}")]
    Run(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            Self::Config(_) | Self::Precondition(_) => Exit::Usage,
            Self::Run(_) | Self::Io { .. } => Exit::Failed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "compound-forms", version, about = "Compound-form operators on flat tori")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the operator's degree constraints
    Validate,
    /// Run the invariant suites
    Check,
    /// Operator and Nijenhuis residuals with a verdict
    Residual,
    /// Gradient against finite differences of the functional
    GradCheck,
    /// Explicit Euler gradient flow, CSV history
    Flow,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Config file, or a builtin: almost-complex-T2, almost-complex-T4, alpha-T4
    #[arg(long, global = true, default_value = "almost-complex-T2")]
    pub config: String,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Points per axis, applied to every axis
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub step_size: Option<f64>,
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    #[arg(long, global = true, hide = true)]
    pub inject_fault: Option<FaultName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FaultName {
    BrokenAdjoint,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(out) = &self.out {
            cfg.params.out = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.resolution {
            cfg.manifold.resolution = vec![n; cfg.manifold.dim];
        }
        if let Some(steps) = self.steps {
            cfg.params.steps = steps;
        }
        if let Some(h) = self.step_size {
            cfg.params.step_size = Some(h);
        }
        if let Some(t) = self.tolerance {
            cfg.params.tolerance = Some(t);
        }
    }
}

/// Caps the global rayon pool at `COMPOUND_FORMS_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("COMPOUND_FORMS_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Config(format!("COMPOUND_FORMS_THREADS={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Run(e.to_string()))
}

/// Loads the config, applies overrides and dispatches; messages go to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Exit {
    let result = RunConfig::load(&cli.overrides.config).and_then(|mut cfg| {
        cli.overrides.apply(&mut cfg);
        commands::dispatch(cli.command, &cfg, &cli.overrides, out)
    });
    match result {
        Ok(exit) => exit,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            e.exit()
        }
    }
}
