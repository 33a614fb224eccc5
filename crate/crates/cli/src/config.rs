//! Run configuration: built-in defaults, overridden by a JSON file, overridden
//! by command-line flags.

use std::fs;
use std::path::Path;

use qfm_core::synthetic::ScenarioConfig;
use qfm_core::{McmcConfig, PriorHyper, SigmaUpdate};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Contents of a `--config` file. Every key is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tau: Option<TauSetting>,
    pub k: Option<usize>,
    /// Expected number of data columns; checked against the data file.
    pub p: Option<usize>,
    pub priors: Option<PriorHyper>,
    pub mcmc: Option<McmcOverrides>,
    pub scenario: Option<ScenarioConfig>,
    /// 1-based column pairs for `qcor`; all pairs when absent.
    pub pairs: Option<Vec<(usize, usize)>>,
    /// Posterior-predictive replicate count for the criteria.
    pub replicates: Option<usize>,
    pub store_latent: Option<bool>,
    pub paper_protocol: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    One(f64),
    Grid(Vec<f64>),
}

impl TauSetting {
    pub fn values(&self) -> Vec<f64> {
        match self {
            TauSetting::One(t) => vec![*t],
            TauSetting::Grid(g) => g.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcOverrides {
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub chains: Option<usize>,
    pub seed: Option<u64>,
    pub proposal_sd: Option<Vec<f64>>,
    pub target_acceptance: Option<(f64, f64)>,
    pub adapt_window: Option<usize>,
    pub sigma_update: Option<SigmaUpdate>,
}

impl McmcOverrides {
    pub fn apply(&self, c: &mut McmcConfig) {
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if let Some(v) = self.thin {
            c.thin = v;
        }
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.proposal_sd {
            c.proposal_sd = Some(v.clone());
        }
        if let Some(v) = self.target_acceptance {
            c.target_acceptance = v;
        }
        if let Some(v) = self.adapt_window {
            c.adapt_window = v;
        }
        if let Some(v) = self.sigma_update {
            c.sigma_update = v;
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<RunConfig, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Parse `0.1,0.5,0.9`.
pub fn parse_tau_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Config(format!("'{t}' is not a quantile level"))))
        .collect()
}
