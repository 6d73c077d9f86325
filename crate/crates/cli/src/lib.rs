//! Command-line orchestration of the pipeline: configuration, stage
//! subcommands, checkpoints and run manifests.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use sepsis_rl::encoders::EncoderKind;

pub use config::{Overrides, Resolved, RunConfig};
pub use error::{CliError, Result};
pub use manifest::RunManifest;

/// Environment variable capping worker threads (0 = one per core).
pub const THREADS_ENV: &str = "SEPSIS_RL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncoderArg {
    Ae,
    Sage,
    Gatv2,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Ae => EncoderKind::Ae,
            EncoderArg::Sage => EncoderKind::Sage,
            EncoderArg::Gatv2 => EncoderKind::Gatv2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sepsis-rl", version, about = "Graph-based offline RL on sepsis-style patient trajectories")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds for policy runs.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Use desk-scale epoch and iteration counts.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    /// Encode with randomly initialised encoders instead of trained ones.
    #[arg(long, global = true)]
    pub untrained_encoder: bool,
    #[arg(long, global = true, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort CSV.
    Generate,
    /// Validate a cohort CSV, drop single-step trajectories and split it.
    Ingest,
    /// Check every trajectory graph and snapshot against the type graph.
    GraphCheck,
    /// Train the encoder/decoder pair (or sweep the grid with --sweep).
    TrainEncoder {
        #[arg(long)]
        sweep: bool,
    },
    /// Encode all splits into latent trajectories.
    Encode,
    /// Train the behaviour-cloning policy on raw observations.
    TrainBc,
    /// Train dBCQ for every seed and aggregate the WIS curves.
    TrainPolicy,
    /// Score the final policies on the test split.
    Evaluate,
    /// Redraw the WIS plot from its CSV.
    Plot,
    /// Run every stage in order.
    Reproduce,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seed.clone(),
            out_dir: self.out.clone(),
            desk_scale: self.desk_scale,
            untrained_encoder: self.untrained_encoder,
            encoder: self.encoder.map(Into::into),
        }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.resolve()
    }
}

/// Applies the thread cap from the environment, once per process.
pub fn init_threads_from_env() -> Result<()> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?;
            sepsis_rl::par::init_threads(n);
        }
        Err(_) => {
            sepsis_rl::par::init_threads(0);
        }
    }
    Ok(())
}

/// Runs one subcommand and returns the manifests it wrote.
pub fn run(cli: &Cli) -> Result<Vec<RunManifest>> {
    let cfg = cli.resolve()?;
    let one = |m: Result<RunManifest>| m.map(|m| vec![m]);
    match &cli.command {
        Command::Generate => one(stages::cmd_generate(&cfg)),
        Command::Ingest => one(stages::cmd_ingest(&cfg)),
        Command::GraphCheck => one(stages::cmd_graph_check(&cfg)),
        Command::TrainEncoder { sweep } => one(stages::cmd_train_encoder(&cfg, *sweep)),
        Command::Encode => one(stages::cmd_encode(&cfg)),
        Command::TrainBc => one(stages::cmd_train_bc(&cfg)),
        Command::TrainPolicy => one(stages::cmd_train_policy(&cfg)),
        Command::Evaluate => one(stages::cmd_evaluate(&cfg)),
        Command::Plot => one(stages::cmd_plot(&cfg)),
        Command::Reproduce => stages::cmd_reproduce(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.run.to_toml());
            Ok(Vec::new())
        }
    }
}
