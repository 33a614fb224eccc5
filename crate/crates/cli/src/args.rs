use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "qfm", version, about = "Bayesian quantile factor models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct McmcArgs {
    /// Total sweeps per chain, burn-in included.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 160,000 sweeps, 10,000 burn-in, thin 50 instead of the desk profile.
    #[arg(long)]
    pub paper_protocol: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Case1,
    Case2,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set as data.csv.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a quantile factor model; writes draws.csv and summary.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// Also write the latent factors and weights to draws.csv.
        #[arg(long)]
        store_latent: bool,
        /// Posterior-predictive replicates for RPS/MAE/MSE (default: every stored draw).
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Bayesian quantile correlations; writes qcor.json.
    Qcor {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated quantile levels.
        #[arg(long)]
        tau: Option<String>,
        /// Column pair such as `1,2`; repeatable. All pairs when omitted.
        #[arg(long = "pair")]
        pairs: Vec<String>,
        #[command(flatten)]
        mcmc: McmcArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Tabulate criteria from two or more summary.json files; writes criteria.csv.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Convergence diagnostics for a fit directory; writes diagnostics.json.
    Diagnose {
        /// Directory holding draws.csv and summary.json.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}
