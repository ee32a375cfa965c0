//! `tsdraft` command line: train the nano bundle, decode, simulate and
//! benchmark.
//!
//! Exit codes: 0 on success, 1 on runtime failure (including a failed
//! lossless check), 2 on usage or configuration errors.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{ConfigError, ControllerName, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Early-exit speculative decoding with Thompson-Sampling draft control
#[derive(Parser, Debug)]
#[command(name = "tsdraft", version, about)]
pub struct Cli {
    /// Flat `key = value` config file
    #[arg(long, short, global = true, env = "TSDRAFT_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the target model on the corpus and write a checkpoint
    TrainTarget,

    /// Self-distill the early-exit block of a trained target
    Distill,

    /// Label drafting rollouts and fit the acceptance predictor
    TrainPredictor,

    /// Speculatively decode a prompts file and report metrics
    Decode {
        /// Prompts file, one prompt per line
        #[arg(long)]
        prompts: Option<PathBuf>,

        /// Controller: fixed, beta-ts or cali-ts
        #[arg(long)]
        controller: Option<ControllerName>,

        /// Draft length for the fixed controller
        #[arg(long)]
        k: Option<usize>,

        /// Also decode with the target alone and fail on any difference
        #[arg(long)]
        check_lossless: bool,

        /// Metrics CSV destination (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Sweep controllers over synthetic model pairs
    Simulate {
        /// Theta schedule, e.g. constant:0.8 or piecewise:0.9@0,0.3@256
        #[arg(long)]
        schedule: Option<String>,

        /// Sweep CSV destination (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Time every controller on the nano bundle, with ablations
    Bench {
        /// Metrics CSV destination (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cli {
    /// File values, then `--set` overrides, then command flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        let mut set = |key: &str, value: String| cfg.set(key, &value);
        match &self.command {
            Command::Decode {
                prompts,
                controller,
                k,
                out,
                ..
            } => {
                if let Some(p) = prompts {
                    set("paths.prompts", p.display().to_string())?;
                }
                if let Some(c) = controller {
                    set("controller.kind", c.to_string())?;
                }
                if let Some(k) = k {
                    set("controller.k", k.to_string())?;
                }
                if let Some(o) = out {
                    set("paths.out_csv", o.display().to_string())?;
                }
            }
            Command::Simulate { schedule, out } => {
                if let Some(s) = schedule {
                    set("sim.schedule", s.clone())?;
                }
                if let Some(o) = out {
                    set("paths.out_csv", o.display().to_string())?;
                }
            }
            Command::Bench { out: Some(o) } => {
                set("paths.out_csv", o.display().to_string())?;
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve()?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    match &cli.command {
        Command::TrainTarget => commands::train_target_cmd(&cfg),
        Command::Distill => commands::distill_cmd(&cfg),
        Command::TrainPredictor => commands::train_predictor_cmd(&cfg),
        Command::Decode { check_lossless, .. } => commands::decode_cmd(&cfg, *check_lossless),
        Command::Simulate { .. } => commands::simulate_cmd(&cfg),
        Command::Bench { .. } => commands::bench_cmd(&cfg),
    }
}
