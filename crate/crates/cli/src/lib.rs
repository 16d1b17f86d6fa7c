//! Command-line driver: configuration, execution and artifact layout.

pub mod config;
pub mod run;

use clap::Parser;
use config::{CommandKind, ExperimentConfig, GridSize};
use std::path::PathBuf;

/// Flags; every value flag mirrors the config key of the same name.
#[derive(Debug, Parser)]
#[command(name = "ssep-mdp", version, about = "Exclusion-process fluctuation experiments")]
pub struct Cli {
    /// Experiment to run; overrides `command` from the config file.
    #[arg(value_enum)]
    pub command: Option<CommandKind>,
    /// JSON config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to SSEP_MDP_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// `bernoulli_star` (particle at the origin) or `bernoulli`.
    #[arg(long)]
    pub initial: Option<String>,
    #[arg(long)]
    pub half_width: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub horizon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<f64>>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub ring_safety_factor: Option<f64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub t: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Comma-separated `NTxNU` grid sizes.
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<GridSize>>,
    #[arg(long)]
    pub u_width_factor: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub half_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Run directory to summarize (`report`).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

impl Cli {
    /// The flag layer as a partial config.
    pub fn flags(&self) -> Result<ExperimentConfig, config::ConfigError> {
        let initial = match &self.initial {
            Some(s) => Some(
                serde_json::from_value(serde_json::Value::String(s.clone())).map_err(|e| config::ConfigError {
                    key: "initial".into(),
                    message: e.to_string(),
                })?,
            ),
            None => None,
        };
        Ok(ExperimentConfig {
            command: self.command,
            seed: self.seed,
            out: self.out.clone(),
            threads: self.threads,
            rho: self.rho,
            initial,
            half_width: self.half_width,
            horizon: self.horizon,
            horizons: self.horizons.clone(),
            replicas: self.replicas,
            ring_safety_factor: self.ring_safety_factor,
            confidence: self.confidence,
            n: self.n,
            theta: self.theta,
            t: self.t,
            alphas: self.alphas.clone(),
            alpha: self.alpha,
            grids: self.grids.clone(),
            u_width_factor: self.u_width_factor,
            tol: self.tol,
            max_iterations: self.max_iterations,
            half_widths: self.half_widths.clone(),
            times: self.times.clone(),
            input: self.input.clone(),
        })
    }

    /// File layer, then flags, then defaults and validation.
    pub fn resolve(&self, env_threads: Option<&str>) -> Result<ExperimentConfig, config::ConfigError> {
        let file = match &self.config {
            Some(p) => config::read_config_file(p)?,
            None => ExperimentConfig::default(),
        };
        file.overridden_by(&self.flags()?).resolve(env_threads)
    }
}

/// Parses, runs and returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    let env = std::env::var(config::THREADS_ENV).ok();
    let resolved = match cli.resolve(env.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    match run::run(&resolved) {
        Ok(done) => {
            print!("{}", done.text);
            done.exit_code()
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
