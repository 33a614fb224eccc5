//! Univariate Bayesian quantile regression and the Bayesian quantile
//! correlation built from a pair of them.
//!
//! The regression `y_i = b0 + b1 x_i + σ a_τ w_i + σ b_τ √w_i z_i` uses the
//! same mixture machinery as the factor model with p = 1 and a known
//! regressor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::dists::{CanonicalGaussian, GigParams, RngStream, Tau};
use crate::error::{QfmError, Result};
use crate::model::PriorHyper;
use crate::sampler::conditionals::{draw_gamma, mh_precision_step, PrecisionKernel};
use crate::sampler::{tune_proposals, McmcConfig, SigmaUpdate, DEFAULT_PROPOSAL_SD};

/// |ρ| below this is weak.
pub const WEAK_BELOW: f64 = 0.3;
/// |ρ| below this (and at least [`WEAK_BELOW`]) is moderate; above, strong.
pub const STRONG_FROM: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantRegDraw {
    pub intercept: f64,
    pub slope: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRegPosterior {
    pub tau: f64,
    /// Stored draws of all chains, chain after chain.
    pub draws: Vec<QuantRegDraw>,
    pub chains: usize,
    /// Post burn-in acceptance of the scale move per chain (1 for Gibbs).
    pub acceptance: Vec<f64>,
}

impl QuantRegPosterior {
    pub fn slopes(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.slope).collect()
    }
}

fn check_inputs(y: &[f64], x: &[f64]) -> Result<()> {
    if y.len() != x.len() {
        return Err(QfmError::Dimension(format!("y has {} values, x has {}", y.len(), x.len())));
    }
    if y.len() < 3 {
        return Err(QfmError::Degenerate(format!("quantile regression needs n >= 3, got {}", y.len())));
    }
    if y.iter().chain(x).any(|v| !v.is_finite()) {
        return Err(QfmError::Degenerate("non-finite value in regression input".into()));
    }
    if x.iter().all(|v| *v == x[0]) {
        return Err(QfmError::Degenerate("regressor is constant".into()));
    }
    Ok(())
}

struct RegState {
    coef: DVector<f64>,
    sigma: f64,
    w: Vec<f64>,
}

fn resid(y: &[f64], x: &[f64], coef: &DVector<f64>, i: usize) -> f64 {
    y[i] - coef[0] - coef[1] * x[i]
}

#[allow(clippy::too_many_arguments)]
fn reg_sweep<R: Rng + ?Sized>(
    s: &mut RegState,
    y: &[f64],
    x: &[f64],
    tau: Tau,
    priors: &PriorHyper,
    update: SigmaUpdate,
    proposal_sd: f64,
    rng: &mut R,
) -> Result<bool> {
    let c = tau.constants();
    let n = y.len();
    let m = s.sigma * c.a;
    let delta = s.sigma * s.sigma * c.b2;

    let a_gig = 2.0 + c.a * c.a / c.b2;
    for i in 0..n {
        let r = resid(y, x, &s.coef, i);
        let w = GigParams::new(0.5, a_gig, r * r / delta)?.sample(rng);
        if !(w > 0.0) || !w.is_finite() {
            return Err(QfmError::Numerical(format!("GIG draw {w} for observation {}", i + 1)));
        }
        s.w[i] = w;
    }

    let mut precision = DMatrix::identity(2, 2) / priors.c0;
    let mut linear = DVector::zeros(2);
    for i in 0..n {
        let h = 1.0 / (s.w[i] * delta);
        let u = y[i] - m * s.w[i];
        precision[(0, 0)] += h;
        precision[(0, 1)] += h * x[i];
        precision[(1, 1)] += h * x[i] * x[i];
        linear[0] += h * u;
        linear[1] += h * x[i] * u;
    }
    precision[(1, 0)] = precision[(0, 1)];
    s.coef = CanonicalGaussian { precision, linear }.sample(rng)?;

    let mut ssq = 0.0;
    let mut sr = 0.0;
    for i in 0..n {
        let r = resid(y, x, &s.coef, i);
        ssq += r * r / s.w[i];
        sr += r;
    }
    let kernel = PrecisionKernel::new(n, priors, tau, ssq, sr);
    let current = 1.0 / (s.sigma * s.sigma);
    let (next, accepted) = match update {
        SigmaUpdate::Gibbs => (draw_gamma(kernel.shape, kernel.rate, rng)?, true),
        _ => {
            let (v, acc, _) = mh_precision_step(&kernel, current, proposal_sd, rng);
            (v, acc)
        }
    };
    s.sigma = 1.0 / next.sqrt();
    Ok(accepted)
}

fn run_reg_chain(
    y: &[f64],
    x: &[f64],
    tau: Tau,
    priors: &PriorHyper,
    config: &McmcConfig,
    stream: RngStream,
) -> Result<(Vec<QuantRegDraw>, f64)> {
    let update = config.sigma_update.resolve(tau)?;
    let mut rng = stream.rng();
    let mut s = RegState { coef: DVector::zeros(2), sigma: priors.s2.sqrt(), w: vec![1.0; y.len()] };
    let mut sd = config.proposal_sd.as_ref().and_then(|v| v.first().copied()).unwrap_or(DEFAULT_PROPOSAL_SD);
    let mut draws = Vec::with_capacity(config.stored_per_chain());
    let (mut window, mut window_len, mut round, mut accepted) = (0usize, 0usize, 0usize, 0usize);
    for t in 1..=config.iterations {
        let acc = reg_sweep(&mut s, y, x, tau, priors, update, sd, &mut rng)?;
        if t <= config.burn_in {
            window += acc as usize;
            window_len += 1;
            if window_len == config.adapt_window {
                let rate = window as f64 / window_len as f64;
                sd = tune_proposals(&[sd], &[rate], round, config.target_acceptance)[0];
                round += 1;
                window = 0;
                window_len = 0;
            }
            continue;
        }
        accepted += acc as usize;
        if (t - config.burn_in).is_multiple_of(config.thin) {
            draws.push(QuantRegDraw { intercept: s.coef[0], slope: s.coef[1], sigma: s.sigma });
        }
    }
    Ok((draws, accepted as f64 / (config.iterations - config.burn_in) as f64))
}

/// Posterior of the τ-th quantile regression of `y` on `x` with intercept.
/// Chain `c` runs on `stream.derive(c)`.
pub fn fit_quantreg(
    y: &[f64],
    x: &[f64],
    tau: Tau,
    priors: &PriorHyper,
    config: &McmcConfig,
    stream: RngStream,
) -> Result<QuantRegPosterior> {
    check_inputs(y, x)?;
    config.validate()?;
    let mut draws = Vec::with_capacity(config.chains * config.stored_per_chain());
    let mut acceptance = Vec::with_capacity(config.chains);
    for c in 0..config.chains {
        let (d, acc) = run_reg_chain(y, x, tau, priors, config, stream.derive(c as u64))?;
        draws.extend(d);
        acceptance.push(acc);
    }
    Ok(QuantRegPosterior { tau: tau.value(), draws, chains: config.chains, acceptance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Moderate,
    Strong,
}

impl Strength {
    pub fn of(rho: f64) -> Strength {
        let r = rho.abs();
        if r < WEAK_BELOW {
            Strength::Weak
        } else if r < STRONG_FROM {
            Strength::Moderate
        } else {
            Strength::Strong
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCorEstimate {
    pub tau: f64,
    pub draws: Vec<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Share of draw pairs whose slope product was negative (ρ set to 0).
    pub negative_fraction: f64,
    pub band: Strength,
}

/// `sign(b_yx) √(b_yx b_xy)`, or 0 when the product is negative.
pub fn rho_from_slopes(b_yx: f64, b_xy: f64) -> f64 {
    let prod = b_yx * b_xy;
    if prod < 0.0 {
        0.0
    } else {
        b_yx.signum() * prod.sqrt()
    }
}

/// Bayesian quantile correlation of `x` and `y`: the regression of y on x runs
/// on `stream.derive(0)`, that of x on y on `stream.derive(1)`, and their t-th
/// slope draws are paired.
pub fn quantile_correlation(
    x: &[f64],
    y: &[f64],
    tau: Tau,
    priors: &PriorHyper,
    config: &McmcConfig,
    stream: RngStream,
) -> Result<QCorEstimate> {
    let yx = fit_quantreg(y, x, tau, priors, config, stream.derive(0))?;
    let xy = fit_quantreg(x, y, tau, priors, config, stream.derive(1))?;
    let mut negative = 0usize;
    let draws: Vec<f64> = yx
        .draws
        .iter()
        .zip(&xy.draws)
        .map(|(a, b)| {
            if a.slope * b.slope < 0.0 {
                negative += 1;
            }
            rho_from_slopes(a.slope, b.slope)
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(QCorEstimate {
        tau: tau.value(),
        mean,
        lower: quantile_sorted(&sorted, 0.025),
        upper: quantile_sorted(&sorted, 0.975),
        negative_fraction: negative as f64 / n,
        band: Strength::of(mean),
        draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCorCurve {
    pub estimates: Vec<QCorEstimate>,
    pub weak_below: f64,
    pub strong_from: f64,
}

/// Independent estimates over a grid; grid point g uses `stream.derive(g)`.
pub fn qcor_curve(
    x: &[f64],
    y: &[f64],
    grid: &[Tau],
    priors: &PriorHyper,
    config: &McmcConfig,
    stream: RngStream,
) -> Result<QCorCurve> {
    let estimates = grid
        .iter()
        .enumerate()
        .map(|(g, &tau)| quantile_correlation(x, y, tau, priors, config, stream.derive(g as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(QCorCurve { estimates, weak_below: WEAK_BELOW, strong_from: STRONG_FROM })
}
