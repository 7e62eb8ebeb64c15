//! `dbhdist` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 an optimizer
//! failed to converge, 4 file-system or I/O failure, 1 anything else.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

/// Marks an error as bad user input (exit code 2).
#[derive(Debug)]
pub struct InvalidInput(pub String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

#[derive(Parser, Debug)]
#[command(
    name = "dbhdist",
    version,
    about = "Predict diameter distributions from remote-sensing metrics and estimate stem-frequency totals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set knn.k=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (data.output).
    #[arg(short, long)]
    out: Option<PathBuf>,

    /// Plot table (data.plots).
    #[arg(long)]
    plots: Option<PathBuf>,

    /// Tree table (data.trees).
    #[arg(long)]
    trees: Option<PathBuf>,

    /// Run single-threaded (run.parallel = false).
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic inventory with known ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Generator seed (simulate.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of plots (simulate.n_plots).
        #[arg(long)]
        n_plots: Option<usize>,
    },
    /// Check input files and report modeling-set exclusions.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a truncated Weibull to every modeling plot.
    FitWeibull {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the parameter prediction models.
    FitPpm {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the joint Weibull likelihood model.
    FitGlm {
        #[command(flatten)]
        common: Common,
    },
    /// Fit MSN nearest-neighbour models, one per species stratum.
    FitKnn {
        #[command(flatten)]
        common: Common,
    },
    /// Choose predictor subsets by simulated annealing.
    SelectVars {
        #[command(flatten)]
        common: Common,
        /// knn, ppm, glm, ppm-scale or ppm-shape (run.method).
        #[arg(long)]
        method: Option<String>,
        /// Skip the fit summaries printed for review (select.auto).
        #[arg(long)]
        auto: bool,
    },
    /// Leave-one-out accuracy of the prediction methods.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods (run.methods).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Direct and model-assisted estimates of stem frequency per DBH class.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Map layers CSV (data.layers); omitted means field classification.
        #[arg(long)]
        layers: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Validate { common }
            | Command::FitWeibull { common }
            | Command::FitPpm { common }
            | Command::FitGlm { common }
            | Command::FitKnn { common }
            | Command::SelectVars { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Estimate { common, .. } => common,
        }
    }

    /// Flag values become overrides applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let c = self.common();
        let quote = |p: &PathBuf| format!("{:?}", p.display().to_string());
        let mut o = c.overrides.clone();
        o.extend(c.out.as_ref().map(|p| format!("data.output={}", quote(p))));
        o.extend(c.plots.as_ref().map(|p| format!("data.plots={}", quote(p))));
        o.extend(c.trees.as_ref().map(|p| format!("data.trees={}", quote(p))));
        if c.sequential {
            o.push("run.parallel=false".into());
        }
        match self {
            Command::Simulate { seed, n_plots, .. } => {
                o.extend(seed.map(|s| format!("simulate.seed={s}")));
                o.extend(n_plots.map(|n| format!("simulate.n_plots={n}")));
            }
            Command::SelectVars { method, auto, .. } => {
                o.extend(method.as_ref().map(|m| format!("run.method={m:?}")));
                if *auto {
                    o.push("select.auto=true".into());
                }
            }
            Command::Evaluate { methods, .. } if !methods.is_empty() => {
                o.push(format!("run.methods={methods:?}"));
            }
            Command::Estimate { layers: Some(p), .. } => o.push(format!("data.layers={}", quote(p))),
            _ => {}
        }
        o
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::resolve(cli.command.common().config.as_deref(), &cli.command.overrides())?;
    match cli.command {
        Command::Simulate { .. } => commands::simulate(&config),
        Command::Validate { .. } => commands::validate(&config),
        Command::FitWeibull { .. } => commands::fit_weibull(&config),
        Command::FitPpm { .. } => commands::fit_ppm(&config),
        Command::FitGlm { .. } => commands::fit_glm(&config),
        Command::FitKnn { .. } => commands::fit_knn(&config),
        Command::SelectVars { .. } => commands::select_vars(&config),
        Command::Evaluate { .. } => commands::evaluate(&config),
        Command::Estimate { .. } => commands::estimate(&config),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InvalidInput>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<dbhdist::Error>() {
            return if e.is_io() {
                4
            } else if e.is_convergence() {
                3
            } else {
                2
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
