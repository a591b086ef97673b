//! Command-line driver: each subcommand runs one experiment or diagnostic
//! and writes CSV tables plus a metadata sidecar.

mod commands;
mod output;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RADIAL_BNN_OUT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl From<radial_bnn::Error> for CliError {
    fn from(e: radial_bnn::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "radial-bnn", version, about = "Radial and mean-field Bayesian neural network experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Seed, overriding the config's.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Radius densities and Monte Carlo radius histograms of MFVI and radial noise.
    SoapBubble {
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
        d: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Histograms of a single noise coordinate.
    Marginal {
        #[arg(long, value_delimiter = ',', default_value = "1,2,10,100,1000")]
        d: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 20000)]
        samples: usize,
        #[arg(long, default_value_t = 60)]
        bins: usize,
    },
    /// NLL gradient spread across noise draws as the posterior scale grows.
    GradVariance {
        /// First-layer parameter count; a multiple of 64.
        #[arg(long, default_value_t = 4608)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.1,0.3,1")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        draws: usize,
    },
    /// Train one network and record per-epoch metrics.
    Train,
    /// Truncated-noise MFVI against untruncated baselines.
    Truncation {
        #[arg(long, default_value_t = radial_bnn::harness::DEFAULT_TRUNCATION_SIGMA)]
        sigma_init: f64,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Split-task continual learning with the posterior carried as prior.
    Continual {
        #[arg(long, value_enum, default_value_t = HeadChoice::Both)]
        head_mode: HeadChoice,
        /// Grid-search epochs, batch size and lr on validation accuracy first.
        #[arg(long)]
        grid: bool,
    },
    /// Reliability bins and ECE on the test split.
    Calibrate {
        /// Posterior snapshot; trains from the config when absent.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// AUC after referring the most uncertain test points.
    Refer {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Uncertainty::Mi)]
        uncertainty: Uncertainty,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
        fractions: Vec<f64>,
    },
    /// Radial entropy constants with their quadrature residuals.
    EntropyCheck {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,10,100,1000")]
        d: Vec<usize>,
    },
    /// Fast numerical checks of the library.
    Selftest,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadChoice {
    Multi,
    Single,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Uncertainty {
    Mi,
    Entropy,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
