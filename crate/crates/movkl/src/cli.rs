//! Command-line front end. Values from the config file are overridden by
//! explicitly given flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::archive::Exponent;
use crate::commands::{cmd_bench, cmd_cv, cmd_eval, cmd_gen, cmd_predict, cmd_train};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "movkl",
    version,
    about = "Multiple operator-valued kernel learning for functional regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Training dataset file.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Ridge parameter.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Norm exponent, a number >= 1 or `inf`.
    #[arg(long)]
    pub r: Option<String>,
}

impl Common {
    /// Load the config file (or defaults) and apply the flags on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(t) = &self.train {
            cfg.data.train = Some(t.clone());
        }
        if let Some(l) = self.lambda {
            cfg.model.lambda = l;
        }
        if let Some(r) = &self.r {
            cfg.model.r = match r.as_str() {
                "inf" => Exponent::from_f64(f64::INFINITY),
                s => Exponent::Finite(s.parse().map_err(|_| {
                    CliError::Usage(format!("--r expects a number or `inf`, got `{s}`"))
                })?),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic latency dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model and write the archive and fit report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Predict target curves with a stored model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset file, or `.csv` for long-format rows.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute RSSE and LCR of a stored model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "movkl-out")]
        output_dir: PathBuf,
        /// Predictions at or above this value count as label 1.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Leave-one-curve-out cross-validation over the configured grid.
    Cv {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the linear solvers on random instances.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = common.resolve()?;
            cmd_gen(&cfg, &out)?;
        }
        Command::Train { common } => {
            let out = cmd_train(&common.resolve()?)?;
            println!("{}", out.model_path.display());
        }
        Command::Predict { model, data, out } => {
            cmd_predict(&model, &data, &out)?;
        }
        Command::Eval {
            model,
            data,
            output_dir,
            threshold,
        } => {
            let report = cmd_eval(&model, &data, &output_dir, threshold)?;
            for row in &report.rows {
                match row.lcr {
                    Some(l) => println!("{} RSSE {:.6} LCR {:.2}", row.algorithm, row.rsse, l),
                    None => println!("{} RSSE {:.6}", row.algorithm, row.rsse),
                }
            }
        }
        Command::Cv { common } => {
            let out = cmd_cv(&common.resolve()?)?;
            println!(
                "lambda {} rank {} cv_rsse {}",
                out.best_lambda, out.best_rank, out.best_rsse
            );
        }
        Command::Bench { common } => {
            let rows = cmd_bench(&common.resolve()?)?;
            println!("{} solver runs", rows.len());
        }
    }
    Ok(())
}
