//! Convergence diagnostics: split potential scale reduction and effective
//! sample size.

use serde::{Deserialize, Serialize};

use crate::dists::Tau;
use crate::error::{QfmError, Result};
use crate::model::variance_decomposition;
use crate::sampler::PosteriorSample;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-R̂. Each chain is trimmed to the shortest length and cut in half
/// (dropping the middle draw when odd). Returns +∞ when the within-chain
/// variance is zero.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.is_empty() || len < 4 {
        return Err(QfmError::Contract(format!("split R-hat needs at least 4 draws per chain, got {len}")));
    }
    let half = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        halves.push(&c[..half]);
        halves.push(&c[len - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let within = halves.iter().map(|h| variance(h)).sum::<f64>() / halves.len() as f64;
    let between = n * variance(&means);
    if !(within > 0.0) {
        return Ok(f64::INFINITY);
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Ok((var_plus / within).sqrt())
}

/// Effective sample size `N / (1 + 2 Σ ρ_t)` using Geyer's initial monotone
/// positive sequence. A constant sequence gives 0. The result never exceeds N.
pub fn ess(draws: &[f64]) -> Result<f64> {
    let n = draws.len();
    if n < 10 {
        return Err(QfmError::Contract(format!("ESS needs at least 10 draws, got {n}")));
    }
    let m = mean(draws);
    let centred: Vec<f64> = draws.iter().map(|v| v - m).collect();
    let autocov = |lag: usize| centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let gamma0 = autocov(0);
    if !(gamma0 > 0.0) {
        return Ok(0.0);
    }
    // Sum of consecutive pairs Γ_m = ρ_{2m} + ρ_{2m+1}, truncated at the first
    // non-positive pair and forced to be non-increasing.
    let mut tau = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / gamma0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += pair;
        prev = pair;
        lag += 2;
    }
    // τ_int = −1 + 2 Σ Γ_m
    let tau_int = (2.0 * tau - 1.0).max(1.0 / n as f64);
    Ok((n as f64 / tau_int).min(n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl TraceSummary {
    pub fn of(x: &[f64]) -> TraceSummary {
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        let sd = if x.len() > 1 { variance(x).sqrt() } else { 0.0 };
        TraceSummary {
            mean: mean(x),
            sd,
            q025: quantile_sorted(&s, 0.025),
            q50: quantile_sorted(&s, 0.5),
            q975: quantile_sorted(&s, 0.975),
        }
    }
}

/// Linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    /// `None` when fewer than two chains or too few draws are available.
    pub psrf: Option<f64>,
    pub ess: f64,
    pub chains: Vec<TraceSummary>,
    /// Latent quantities (w_i, f_i) whose diagnostics are indicative only.
    pub high_dimensional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub parameters: Vec<ParameterDiagnostics>,
}

impl DiagnosticsReport {
    /// Largest split-R̂ over identifiable parameters.
    pub fn max_psrf(&self) -> Option<f64> {
        self.parameters
            .iter()
            .filter(|p| !p.high_dimensional)
            .filter_map(|p| p.psrf)
            .max_by(f64::total_cmp)
    }
}

/// Diagnostics for named per-chain traces.
pub fn diagnose_traces(traces: Vec<(String, Vec<Vec<f64>>, bool)>) -> Result<DiagnosticsReport> {
    let mut parameters = Vec::with_capacity(traces.len());
    for (name, chains, high_dimensional) in traces {
        let total: usize = chains.iter().map(Vec::len).sum();
        let psrf = if chains.len() >= 2 || chains.first().is_some_and(|c| c.len() >= 4) {
            psrf(&chains).ok()
        } else {
            None
        };
        let ess_total = chains
            .iter()
            .filter(|c| c.len() >= 10)
            .map(|c| ess(c))
            .sum::<Result<f64>>()?
            .min(total as f64);
        parameters.push(ParameterDiagnostics {
            name,
            psrf,
            ess: ess_total,
            chains: chains.iter().map(|c| TraceSummary::of(c)).collect(),
            high_dimensional,
        });
    }
    Ok(DiagnosticsReport { parameters })
}

/// Diagnose the free loadings, the scales and the variance-decomposition
/// totals; optionally the latent weights and factors as well.
pub fn diagnose(sample: &PosteriorSample, tau: Tau, include_latent: bool) -> Result<DiagnosticsReport> {
    let first = sample
        .draws()
        .next()
        .ok_or_else(|| QfmError::Contract("posterior sample is empty".into()))?;
    let (p, k) = first.beta.shape();
    let n = first.w.len();
    let mut traces = Vec::new();
    for j in 0..p {
        for l in 0..k.min(j + 1) {
            traces.push((format!("beta[{},{}]", j + 1, l + 1), sample.traces(|s| s.beta[(j, l)]), false));
        }
    }
    for j in 0..p {
        traces.push((format!("sigma[{}]", j + 1), sample.traces(|s| s.sigma[j]), false));
    }
    for j in 0..p {
        let chains = sample
            .chains
            .iter()
            .map(|c| {
                c.draws
                    .iter()
                    .map(|s| variance_decomposition(&s.beta, &s.sigma, tau, false).map(|dv| dv[(j, k)]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        traces.push((format!("dv[{}]", j + 1), chains, false));
    }
    if include_latent {
        for i in 0..n {
            traces.push((format!("w[{}]", i + 1), sample.traces(|s| s.w[i]), true));
            for l in 0..k {
                traces.push((format!("f[{},{}]", i + 1, l + 1), sample.traces(|s| s.f[(i, l)]), true));
            }
        }
    }
    diagnose_traces(traces)
}
