//! MCMC engine for the quantile factor model.
//!
//! One sweep updates, in order, the mixture weights w, the latent factors f,
//! every loading row, and the idiosyncratic scales σ. At τ = 1/2 the scales
//! have a Gamma full conditional; elsewhere they move by a log-scale random
//! walk Metropolis step whose step sizes are tuned during burn-in only.

mod chain;
pub mod conditionals;
mod tuning;

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dists::{RngStream, Tau};
use crate::error::{QfmError, Result};
use crate::model::ChainState;

pub use chain::{fit, initial_state, run_chain, run_parallel_chains, sweep};
pub use conditionals::{
    beta_row_conditional, f_conditional, sigma_kernel, update_beta_row, update_f, update_sigma_gibbs,
    update_sigma_mh, update_w, w_conditional, PrecisionKernel,
};
pub use tuning::{tune_proposals, DEFAULT_PROPOSAL_SD};

/// How the idiosyncratic scales are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaUpdate {
    /// Gibbs at the median, Metropolis otherwise.
    #[default]
    Auto,
    Gibbs,
    Mh,
}

impl SigmaUpdate {
    pub fn resolve(self, tau: Tau) -> Result<SigmaUpdate> {
        match self {
            SigmaUpdate::Auto if tau.is_median() => Ok(SigmaUpdate::Gibbs),
            SigmaUpdate::Auto => Ok(SigmaUpdate::Mh),
            SigmaUpdate::Gibbs if !tau.is_median() => Err(QfmError::Contract(format!(
                "Gibbs scale updates need tau = 0.5, got {}",
                tau.value()
            ))),
            other => Ok(other),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SigmaUpdate::Auto => "auto",
            SigmaUpdate::Gibbs => "gibbs",
            SigmaUpdate::Mh => "mh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    /// Total sweeps including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Initial random-walk step on log σ⁻², one per variable. Defaults to
    /// [`DEFAULT_PROPOSAL_SD`] for every variable.
    #[serde(default)]
    pub proposal_sd: Option<Vec<f64>>,
    /// Acceptance band the tuner aims for.
    pub target_acceptance: (f64, f64),
    /// Sweeps per adaptation round during burn-in.
    pub adapt_window: usize,
    #[serde(default)]
    pub sigma_update: SigmaUpdate,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl McmcConfig {
    /// 20,000 sweeps, 2,000 burn-in, thin 10, 2 chains.
    pub fn desk() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 2_000,
            thin: 10,
            chains: 2,
            seed: 1,
            proposal_sd: None,
            target_acceptance: (0.25, 0.45),
            adapt_window: 50,
            sigma_update: SigmaUpdate::Auto,
        }
    }

    /// 160,000 sweeps, 10,000 burn-in, thin 50, 2 chains.
    pub fn paper_protocol() -> Self {
        Self { iterations: 160_000, burn_in: 10_000, thin: 50, ..Self::desk() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QfmError::Contract(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations));
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        if self.chains == 0 {
            return bad("at least one chain is required".into());
        }
        if self.adapt_window == 0 {
            return bad("adaptation window must be positive".into());
        }
        let (lo, hi) = self.target_acceptance;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("acceptance band ({lo}, {hi}) is not an interval inside (0, 1)"));
        }
        if let Some(sd) = &self.proposal_sd {
            if sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return bad("proposal scales must be positive".into());
            }
        }
        Ok(())
    }

    /// Number of stored draws per chain.
    pub fn stored_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Output of a single chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub stream: RngStream,
    /// Post burn-in, thinned states.
    pub draws: Vec<ChainState>,
    /// 1-based sweep index of each stored state.
    pub iterations: Vec<usize>,
    /// Post burn-in acceptance rate of each σ_j move (1 for Gibbs updates).
    pub acceptance: Vec<f64>,
    /// Final (frozen) proposal scales.
    pub proposal_sd: Vec<f64>,
    /// Whether the last burn-in window landed inside the target band.
    pub tuning_converged: bool,
    /// Proposals rejected because the kernel was not finite.
    pub nonfinite_rejections: usize,
    pub sigma_update: SigmaUpdate,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Draws from one or more chains, each with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub chains: Vec<ChainOutput>,
}

impl PosteriorSample {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_draws() == 0
    }

    pub fn draws(&self) -> impl Iterator<Item = &ChainState> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    fn first(&self) -> Result<&ChainState> {
        self.draws().next().ok_or_else(|| QfmError::Contract("posterior sample is empty".into()))
    }

    fn mean_of<T, F>(&self, init: T, get: F) -> Result<T>
    where
        T: std::ops::AddAssign<T> + std::ops::DivAssign<f64>,
        F: Fn(&ChainState) -> T,
    {
        let mut acc = init;
        let mut n = 0usize;
        for s in self.draws() {
            acc += get(s);
            n += 1;
        }
        if n == 0 {
            return Err(QfmError::Contract("posterior sample is empty".into()));
        }
        acc /= n as f64;
        Ok(acc)
    }

    pub fn beta_mean(&self) -> Result<DMatrix<f64>> {
        let s = self.first()?;
        self.mean_of(DMatrix::zeros(s.beta.nrows(), s.beta.ncols()), |d| d.beta.clone())
    }

    pub fn sigma_mean(&self) -> Result<DVector<f64>> {
        let s = self.first()?;
        self.mean_of(DVector::zeros(s.sigma.len()), |d| d.sigma.clone())
    }

    pub fn w_mean(&self) -> Result<DVector<f64>> {
        let s = self.first()?;
        self.mean_of(DVector::zeros(s.w.len()), |d| d.w.clone())
    }

    pub fn f_mean(&self) -> Result<DMatrix<f64>> {
        let s = self.first()?;
        self.mean_of(DMatrix::zeros(s.f.nrows(), s.f.ncols()), |d| d.f.clone())
    }

    /// Posterior mean of a scalar function of the state.
    pub fn mean_scalar<F: Fn(&ChainState) -> f64>(&self, get: F) -> Result<f64> {
        self.mean_of(0.0, get)
    }

    /// Per-chain traces of a scalar function of the state.
    pub fn traces<F: Fn(&ChainState) -> f64>(&self, get: F) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(&get).collect()).collect()
    }

    /// Posterior mean of the (standard or modified) variance decomposition.
    pub fn variance_decomposition_mean(&self, tau: Tau, modified: bool) -> Result<DMatrix<f64>> {
        let s = self.first()?;
        let mut acc = DMatrix::zeros(s.beta.nrows(), s.beta.ncols() + 1);
        let mut n = 0.0;
        for d in self.draws() {
            acc += crate::model::variance_decomposition(&d.beta, &d.sigma, tau, modified)?;
            n += 1.0;
        }
        Ok(acc / n)
    }
}
