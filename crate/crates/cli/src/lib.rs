//! CLI over the metric-learning pipeline: ingestion, the contrastive
//! baseline, the Siamese-kernel GP fit, per-user personalization, ranking
//! evaluation, and the synthetic-oracle theory experiments — all driven by
//! one declarative config file and reproducible from config + seed.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use commands::EvalScope;
use config::RunConfig;
use metricgp::Result;

#[derive(Debug, Parser)]
#[command(name = "metricgp", version, about = "Item-to-item metric learning pipeline")]
pub struct Cli {
    /// Cap the worker-thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Population,
    User,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the data files and print a catalog summary.
    Ingest {
        #[arg(long, value_name = "F")]
        config: PathBuf,
    },
    /// Train the contrastive Siamese baseline on pair annotations.
    TrainBaseline {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        #[arg(long, value_name = "D")]
        out: PathBuf,
    },
    /// Fit the Siamese-kernel GP on surrogate targets.
    TrainSsl {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        /// Baseline parameter checkpoint to initialize from.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        #[arg(long, value_name = "D")]
        out: PathBuf,
    },
    /// Meta-train the aggregation weights and adapt them per user.
    Personalize {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        /// Fitted GP checkpoint (from train-ssl).
        #[arg(long, value_name = "CKPT")]
        ssl: PathBuf,
        #[arg(long, value_name = "D")]
        out: PathBuf,
    },
    /// Rank the catalog and score HR/MRR/NDCG against co-interactions.
    Evaluate {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        /// Model checkpoint: a fitted GP or bare metric parameters.
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long, value_name = "D")]
        out: PathBuf,
    },
    /// Run the synthetic-oracle convergence experiment.
    Theory {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        #[arg(long, value_name = "D")]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Ignore failures from double initialization (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Ingest { config } => {
            let config = RunConfig::load(&config)?;
            commands::ingest(&config)
        }
        Command::TrainBaseline { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::train_baseline(&config, &out)
        }
        Command::TrainSsl { config, init, out } => {
            let config = RunConfig::load(&config)?;
            if let Some(init) = &init {
                commands::require_checkpoint(init)?;
            }
            commands::train_ssl(&config, init.as_deref(), &out)
        }
        Command::Personalize { config, ssl, out } => {
            let config = RunConfig::load(&config)?;
            commands::require_checkpoint(&ssl)?;
            commands::personalize(&config, &ssl, &out)
        }
        Command::Evaluate {
            config,
            model,
            scope,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            commands::require_checkpoint(&model)?;
            let scope = match scope {
                ScopeArg::Population => EvalScope::Population,
                ScopeArg::User => EvalScope::User,
            };
            commands::evaluate_cmd(&config, &model, scope, &out)
        }
        Command::Theory { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::theory_cmd(&config, &out)
        }
    }
}
