//! Command-line front end for the `cdg` binary.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors (including a
//! refusal to overwrite existing outputs), 1 for runtime failures.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cdg", version, about = "Condition-degradation guidance on a toy diffusion model")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed` from the config).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank a prompt's tokens by Weighted PageRank over encoder self-attention.
    RankTokens {
        prompt: String,
    },
    /// Build the degradation mask for a prompt.
    BuildMask {
        prompt: String,
        /// Degradation ratio in [0, 2]; falls back to the config's `r_deg`, then 1.0.
        #[arg(long)]
        r_deg: Option<f64>,
    },
    /// Run the guided sampler for each prompt.
    Sample {
        /// Sample this prompt instead of the configured list.
        #[arg(long)]
        prompt: Option<String>,
        /// Add per-run wall time to the metadata (makes it nondeterministic).
        #[arg(long)]
        record_timing: bool,
    },
    /// Sample across a grid of degradation ratios.
    Sweep {
        /// Comma-separated R_deg values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Geometric decoupling and interference of CFG and CDG deltas per noise level.
    Diagnose {
        #[arg(long)]
        subspace_dim: Option<usize>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidRatio(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(config::DEFAULT_OUTPUT_DIR));
    let out = commands::Output::new(dir, cli.force);
    match &cli.command {
        Command::RankTokens { prompt } => commands::rank_tokens(&cfg, &out, prompt),
        Command::BuildMask { prompt, r_deg } => {
            let r = r_deg.or(cfg.guidance.r_deg).unwrap_or(1.0);
            commands::build_mask(&cfg, &out, prompt, r)
        }
        Command::Sample { prompt, record_timing } => commands::sample(&cfg, &out, prompt.as_deref(), *record_timing),
        Command::Sweep { grid } => {
            if let Some(g) = grid {
                cfg.r_deg_grid = Some(g.clone());
                cfg.validate()?;
            }
            commands::sweep(&cfg, &out)
        }
        Command::Diagnose { subspace_dim } => {
            if subspace_dim.is_some() {
                cfg.subspace_dim = *subspace_dim;
                cfg.validate()?;
            }
            commands::diagnose(&cfg, &out)
        }
    }
}
