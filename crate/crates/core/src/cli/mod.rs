//! `mf` command-line front end.
//!
//! Every command reads an optional JSON config (`--config`), applies flag
//! overrides, validates everything, computes all outputs in memory, and only
//! then writes them, so failures leave no partial results. Errors print as
//! `error[CODE]: message` on stderr; exit status is 2 for configuration
//! problems, 3 for numeric failures, 4 for I/O.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{ablation_settings, AblationKind, AblationRow};
pub use config::{
    CodecSpec, DenoiserSpec, Resolved, RunConfig, ScheduleSpec, TraceLevel, TrainSpec, SPEC_VERSION,
};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_CONFIG,
            code,
            message: message.into(),
        }
    }

    pub fn numeric(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_NUMERIC,
            code,
            message: message.into(),
        }
    }

    pub fn io(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_IO,
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(_) => CliError::io("IO", e.to_string()),
            Error::NonFinite { .. } => CliError::numeric("NUMERIC_NONFINITE", e.to_string()),
            Error::Diverged { .. } => CliError::numeric("TRAIN_NONFINITE", e.to_string()),
            Error::InfiniteSnr(_) => CliError::numeric("NUMERIC_INFINITE_SNR", e.to_string()),
            _ => CliError::config("CONFIG_INVALID", e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mf",
    version,
    about = "Truncate-and-relay multi-resolution diffusion sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (falls back to the config, then MF_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Named plan, e.g. sdm, sdxl-toy.
    #[arg(long)]
    pub preset: Option<String>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one sampling pipeline and write image, trace, and cost report.
    Generate(Common),
    /// Print and write the compute-cost report of a plan.
    Cost(Common),
    /// Sweep one hyperparameter holding the seed fixed.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKindArg,
        #[command(flatten)]
        common: Common,
    },
    /// Train the tiny denoiser on the synthetic dataset.
    Train(Common),
    /// Write the base and per-stage noise schedules as CSV.
    ScheduleDump(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationKindArg {
    Upsampler,
    Gamma,
    Delta,
    Truncation,
    Guidance,
}

impl From<AblationKindArg> for AblationKind {
    fn from(k: AblationKindArg) -> Self {
        match k {
            AblationKindArg::Upsampler => AblationKind::Upsampler,
            AblationKindArg::Gamma => AblationKind::Gamma,
            AblationKindArg::Delta => AblationKind::Delta,
            AblationKindArg::Truncation => AblationKind::Truncation,
            AblationKindArg::Guidance => AblationKind::Guidance,
        }
    }
}

impl Common {
    /// Config file (or defaults) with flag overrides applied.
    pub fn load_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.preset = Some(p.clone());
            cfg.plan = None;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.jobs == 0 {
            return Err(CliError::config("CONFIG_INVALID", "--jobs must be >= 1"));
        }
        Ok(cfg)
    }

    pub fn out_dir(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| {
                std::env::var_os("MF_OUT_DIR")
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
    }

    pub fn require_out_dir(&self, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        self.out_dir(cfg).ok_or_else(|| {
            CliError::config(
                "CONFIG_NO_OUTPUT_DIR",
                "no output directory: pass --out, set out_dir, or set MF_OUT_DIR",
            )
        })
    }
}

/// Files staged in memory, written together at the end of a command.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(&self, dir: &Path) -> Result<(), CliError> {
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::io("IO_WRITE", format!("{}: {e}", parent.display())))?;
            }
            fs::write(&path, bytes)
                .map_err(|e| CliError::io("IO_WRITE", format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => commands::generate(&c),
        Command::Cost(c) => commands::cost(&c),
        Command::Ablate { kind, common } => commands::ablate(kind.into(), &common),
        Command::Train(c) => commands::train(&c),
        Command::ScheduleDump(c) => commands::schedule_dump(&c),
    }
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let exit = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return exit;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit
        }
    }
}
