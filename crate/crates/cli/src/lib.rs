//! `awg` command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, RunOptions};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, config or inputs. Exit code 2.
    Usage(String),
    /// Numeric or output failure during a run. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<awg_core::Error> for CliError {
    fn from(e: awg_core::Error) -> Self {
        match e {
            awg_core::Error::Numeric(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "awg", version, about = "Adaptive wavelet forecasting: train, evaluate, ablate, inspect, benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `synth` or a CSV path.
    #[arg(long)]
    pub data: Option<String>,
    /// MCAR rate applied to evaluation inputs.
    #[arg(long)]
    pub mcar: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated evaluation horizons.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train to max_steps, then checkpoint and evaluate.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Train and score every ablation variant.
    Ablate(Common),
    /// Dump bases, masks, decompositions and time-bandwidth products.
    Inspect(Common),
    /// Time the transform and the attention across lengths.
    Bench(Common),
}

impl Common {
    /// File config with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.set(s)?;
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.run.data = d.clone();
        }
        if let Some(m) = self.mcar {
            if !(0.0..1.0).contains(&m) {
                return Err(CliError::Usage(format!("--mcar {m} outside [0, 1)")));
            }
            cfg.run.mcar = m;
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.to_string_lossy().into_owned();
        }
        if let Some(c) = &self.checkpoint {
            cfg.run.checkpoint = c.to_string_lossy().into_owned();
        }
        if let Some(h) = &self.horizons {
            cfg.run.eval_horizons = h.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval(c) => commands::eval(&c.resolve()?, c.horizons.is_some()),
        Command::Ablate(c) => commands::ablate(&c.resolve()?).map(|_| ()),
        Command::Inspect(c) => commands::inspect(&c.resolve()?),
        Command::Bench(c) => commands::bench(&c.resolve()?).map(|_| ()),
    }
}
