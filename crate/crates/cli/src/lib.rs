//! Experiment runner for the CopRA lab. Each subcommand reads one JSON
//! config, writes CSV results, a `summary.json`, a copy of the resolved
//! config, and finally a `manifest.json` with SHA-256 hashes of everything
//! it wrote.

pub mod analysis_cmds;
pub mod config;
pub mod output;
pub mod sim_cmds;
pub mod train_cmds;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;

use config::read_config;

#[derive(Debug, Parser)]
#[command(name = "copra-lab", version, about = "Progressive LoRA layer dropping, merging and pruning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config for the subcommand; omitted fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Worker threads for independent runs. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Pretrain a base network on a source task.
    Pretrain,
    /// Train adapter sets, one per seed.
    Train,
    /// Merge two or more adapter checkpoints.
    Merge,
    /// Interpolation curves and barriers between adapter pairs.
    Interp,
    /// Layerwise Shapley values of trained adapters.
    Shapley,
    /// Structured and unstructured pruning sweeps.
    Prune,
    /// Simulated federated training on disjoint shards.
    Fedsim,
    /// Two-task training followed by fusion.
    Mtlsim,
    /// Learning-rate by step-count sweep.
    Ablate,
}

fn load<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(T::default()),
    }
}

/// Runs one subcommand and returns its summary.
pub fn run(cli: &Cli) -> Result<Value> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build().context("building thread pool")?;
    let cfg = cli.config.as_deref();
    let seed = cli.seed_override;
    let out = cli.out.as_path();
    let no_seed = |name: &str| -> Result<()> {
        if seed.is_some() {
            bail!("{name} has no seed to override");
        }
        Ok(())
    };
    pool.install(|| match cli.command {
        Command::Pretrain => {
            let mut c: config::PretrainCmd = load(cfg)?;
            if let Some(s) = seed {
                c.recipe.seed = s;
            }
            train_cmds::cmd_pretrain(&c, out)
        }
        Command::Train => {
            let mut c: config::TrainCmd = load(cfg)?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            train_cmds::cmd_train(&c, out)
        }
        Command::Merge => {
            no_seed("merge")?;
            analysis_cmds::cmd_merge(&load(cfg)?, out)
        }
        Command::Interp => {
            no_seed("interp")?;
            analysis_cmds::cmd_interp(&load(cfg)?, out)
        }
        Command::Shapley => {
            let mut c: config::ShapleyCmd = load(cfg)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            analysis_cmds::cmd_shapley(&c, out)
        }
        Command::Prune => {
            no_seed("prune")?;
            analysis_cmds::cmd_prune(&load(cfg)?, out)
        }
        Command::Fedsim => {
            let mut c: config::FedCmd = load(cfg)?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            sim_cmds::cmd_fedsim(&c, out)
        }
        Command::Mtlsim => {
            let mut c: config::MtlCmd = load(cfg)?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            sim_cmds::cmd_mtlsim(&c, out)
        }
        Command::Ablate => {
            let mut c: config::AblateCmd = load(cfg)?;
            if let Some(s) = seed {
                c.seeds = [s, s.wrapping_add(1)];
            }
            sim_cmds::cmd_ablate(&c, out)
        }
    })
}
