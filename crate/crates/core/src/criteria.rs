//! Model-comparison criteria: likelihood-based (AIC, BIC, BIC*, ICOMP),
//! the ranked probability score, and MAE/MSE goodness of fit. Smaller is
//! better for all of them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dists::cholesky_lower;
use crate::error::{QfmError, Result};
use crate::model::{ChainState, ValidSpec};
use crate::sampler::PosteriorSample;

/// Shown whenever criteria from different model families share a table.
pub const CROSS_FAMILY_WARNING: &str = "criteria compare models within the same distribution class; \
values from different model families are not directly comparable";

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of free parameters `p(k+1) − k(k−1)/2`.
pub fn parameter_count(p: usize, k: usize) -> usize {
    p * (k + 1) - k * k.saturating_sub(1) / 2
}

/// Effective sample size for BIC*: `n − (2p+11)/6 − 2k/3`.
pub fn effective_n(n: usize, p: usize, k: usize) -> f64 {
    n as f64 - (2.0 * p as f64 + 11.0) / 6.0 - 2.0 * k as f64 / 3.0
}

/// Covariance-complexity penalty `2(k+1)[(p/2) log(tr Δ / p) − ½ log|Δ|]` for
/// a diagonal Δ.
pub fn icomp_penalty(delta: &DVector<f64>, k: usize) -> Result<f64> {
    if delta.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(QfmError::Numerical("ICOMP needs a positive definite scatter".into()));
    }
    let p = delta.len() as f64;
    let log_det: f64 = delta.iter().map(|d| d.ln()).sum();
    let bracket = 0.5 * p * (delta.sum() / p).ln() - 0.5 * log_det;
    Ok(2.0 * (k + 1) as f64 * bracket.max(0.0))
}

/// Plug-in point for the likelihood criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlugIn {
    pub beta: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub w: DVector<f64>,
}

impl PlugIn {
    /// Posterior means of β, σ and each w_i.
    pub fn posterior_mean(sample: &PosteriorSample) -> Result<PlugIn> {
        Ok(PlugIn { beta: sample.beta_mean()?, sigma: sample.sigma_mean()?, w: sample.w_mean()? })
    }
}

/// `l = −2 Σ_i log N_p(y_i; m w_i, ββᵀ + w_i Δ)` at the plug-in point.
pub fn loglik_at(plug: &PlugIn, data: &DMatrix<f64>, spec: &ValidSpec) -> Result<f64> {
    let (n, p) = data.shape();
    if plug.w.len() != n || plug.beta.nrows() != p || plug.sigma.len() != p {
        return Err(QfmError::Dimension("plug-in values do not match the data".into()));
    }
    let c = spec.constants();
    let m = &plug.sigma * c.a;
    let delta = plug.sigma.map(|s| s * s * c.b2);
    let bbt = &plug.beta * plug.beta.transpose();
    let mut total = 0.0;
    for i in 0..n {
        let wi = plug.w[i];
        let mut cov = bbt.clone();
        for j in 0..p {
            cov[(j, j)] += wi * delta[j];
        }
        let l = cholesky_lower(&cov)
            .map_err(|_| QfmError::Numerical(format!("marginal covariance of observation {} is singular", i + 1)))?;
        let r = data.row(i).transpose() - &m * wi;
        let z = l
            .solve_lower_triangular(&r)
            .ok_or_else(|| QfmError::Numerical("triangular solve failed".into()))?;
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += p as f64 * LN_2PI + log_det + z.norm_squared();
    }
    Ok(total)
}

/// `l` evaluated at posterior means.
pub fn marginal_loglik(sample: &PosteriorSample, data: &DMatrix<f64>, spec: &ValidSpec) -> Result<f64> {
    loglik_at(&PlugIn::posterior_mean(sample)?, data, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub l: f64,
    pub p_k: usize,
    pub n_tilde: f64,
    pub aic: f64,
    pub bic: f64,
    /// `None` when ñ ≤ 0.
    pub bic_star: Option<f64>,
    pub icomp: f64,
    pub warnings: Vec<String>,
}

/// AIC, BIC, BIC* and ICOMP from `l` and the plug-in scatter Δ̂.
pub fn information_criteria(l: f64, spec: &ValidSpec, delta_hat: &DVector<f64>) -> Result<InformationCriteria> {
    let (n, p, k) = (spec.n, spec.p, spec.k);
    let p_k = parameter_count(p, k);
    let n_tilde = effective_n(n, p, k);
    let mut warnings = Vec::new();
    let bic_star = if n_tilde > 0.0 {
        Some(l + n_tilde.ln() * p_k as f64)
    } else {
        warnings.push(format!("BIC* undefined: effective sample size {n_tilde} is not positive"));
        None
    };
    Ok(InformationCriteria {
        l,
        p_k,
        n_tilde,
        aic: l + 2.0 * p_k as f64,
        bic: l + (n as f64).ln() * p_k as f64,
        bic_star,
        icomp: l + icomp_penalty(delta_hat, k)?,
        warnings,
    })
}

/// Where predictive replicates take their factors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSource {
    /// Each stored draw's own f_i.
    #[default]
    Posterior,
    /// Fresh f_i ~ N(0, I) per replicate.
    Prior,
}

/// Posterior-predictive replicates: `reps[t]` is an n×p matrix.
pub fn predictive_replicates<R: Rng + ?Sized>(
    draws: &[&ChainState],
    spec: &ValidSpec,
    source: FactorSource,
    rng: &mut R,
) -> Vec<DMatrix<f64>> {
    let c = spec.constants();
    let (n, p, k) = (spec.n, spec.p, spec.k);
    draws
        .iter()
        .map(|s| {
            let mut y = DMatrix::zeros(n, p);
            let mut f = DVector::zeros(k);
            for i in 0..n {
                match source {
                    FactorSource::Posterior => f.copy_from(&s.f.row(i).transpose()),
                    FactorSource::Prior => f.iter_mut().for_each(|v| *v = StandardNormal.sample(rng)),
                }
                let w: f64 = Exp1.sample(rng);
                for j in 0..p {
                    let z: f64 = StandardNormal.sample(rng);
                    let sig = s.sigma[j];
                    let common: f64 = (0..k).map(|l| s.beta[(j, l)] * f[l]).sum();
                    y[(i, j)] = common + sig * c.a * w + (w * c.b2).sqrt() * sig * z;
                }
            }
            y
        })
        .collect()
}

/// `1/(pn) Σ_{i,j} ( mean_t |a_t − y| − ½ mean_t |a_t − b_t| )` for two
/// independent replicate sets.
pub fn rps_from_replicates(a: &[DMatrix<f64>], b: &[DMatrix<f64>], data: &DMatrix<f64>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(QfmError::Contract("RPS needs two equal, non-empty replicate sets".into()));
    }
    let t = a.len() as f64;
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        if ra.shape() != data.shape() || rb.shape() != data.shape() {
            return Err(QfmError::Dimension("replicate shape differs from the data".into()));
        }
        total += ra.iter().zip(data.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        total -= 0.5 * ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / (t * data.len() as f64))
}

/// MAE and MSE of a point prediction over all n·p cells.
pub fn mae_mse_of(prediction: &DMatrix<f64>, data: &DMatrix<f64>) -> Result<(f64, f64)> {
    if prediction.shape() != data.shape() || data.is_empty() {
        return Err(QfmError::Dimension("prediction shape differs from the data".into()));
    }
    let cells = data.len() as f64;
    let mae = prediction.iter().zip(data.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / cells;
    let mse = prediction.iter().zip(data.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cells;
    Ok((mae, mse))
}

fn replicate_draws(sample: &PosteriorSample, replicates: Option<usize>) -> Result<Vec<&ChainState>> {
    let all: Vec<&ChainState> = sample.draws().collect();
    if all.is_empty() {
        return Err(QfmError::Contract("posterior sample is empty".into()));
    }
    Ok(match replicates {
        Some(t) if t < all.len() => {
            let stride = all.len() as f64 / t as f64;
            (0..t).map(|i| all[(i as f64 * stride) as usize]).collect()
        }
        _ => all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveScores {
    pub rps: f64,
    pub mae: f64,
    pub mse: f64,
    pub replicates: usize,
}

/// RPS, MAE and MSE from posterior-predictive replicates, one pair per stored
/// draw (or `replicates` evenly spaced draws). The point prediction for MAE
/// and MSE is the mean of the first replicate set.
pub fn predictive_scores<R: Rng + ?Sized>(
    sample: &PosteriorSample,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    replicates: Option<usize>,
    source: FactorSource,
    rng: &mut R,
) -> Result<PredictiveScores> {
    if data.shape() != (spec.n, spec.p) {
        return Err(QfmError::Dimension("data do not match the model dimensions".into()));
    }
    let draws = replicate_draws(sample, replicates)?;
    let a = predictive_replicates(&draws, spec, source, rng);
    let b = predictive_replicates(&draws, spec, source, rng);
    let rps = rps_from_replicates(&a, &b, data)?;
    let mut mean = DMatrix::zeros(spec.n, spec.p);
    for r in &a {
        mean += r;
    }
    mean /= a.len() as f64;
    let (mae, mse) = mae_mse_of(&mean, data)?;
    Ok(PredictiveScores { rps, mae, mse, replicates: draws.len() })
}

pub fn rps<R: Rng + ?Sized>(sample: &PosteriorSample, data: &DMatrix<f64>, spec: &ValidSpec, rng: &mut R) -> Result<f64> {
    Ok(predictive_scores(sample, data, spec, None, FactorSource::Posterior, rng)?.rps)
}

pub fn mae_mse<R: Rng + ?Sized>(
    sample: &PosteriorSample,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let s = predictive_scores(sample, data, spec, None, FactorSource::Posterior, rng)?;
    Ok((s.mae, s.mse))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub family: String,
    pub tau: f64,
    pub k: usize,
    pub icomp: f64,
    pub aic: f64,
    pub bic: f64,
    pub bic_star: Option<f64>,
    pub rps: f64,
    pub mae: f64,
    pub mse: f64,
    pub l: f64,
    pub p_k: usize,
    pub n_tilde: f64,
    pub replicates: usize,
    pub plug_in: PlugIn,
    pub warnings: Vec<String>,
}

/// The full criteria table row for one fit.
pub fn criteria_report<R: Rng + ?Sized>(
    sample: &PosteriorSample,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    replicates: Option<usize>,
    rng: &mut R,
) -> Result<CriteriaReport> {
    let plug = PlugIn::posterior_mean(sample)?;
    let l = loglik_at(&plug, data, spec)?;
    let b2 = spec.constants().b2;
    let delta_hat = plug.sigma.map(|s| s * s * b2);
    let ic = information_criteria(l, spec, &delta_hat)?;
    let scores = predictive_scores(sample, data, spec, replicates, FactorSource::Posterior, rng)?;
    Ok(CriteriaReport {
        family: "qfm".into(),
        tau: spec.tau,
        k: spec.k,
        icomp: ic.icomp,
        aic: ic.aic,
        bic: ic.bic,
        bic_star: ic.bic_star,
        rps: scores.rps,
        mae: scores.mae,
        mse: scores.mse,
        l,
        p_k: ic.p_k,
        n_tilde: ic.n_tilde,
        replicates: scores.replicates,
        plug_in: plug,
        warnings: ic.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::RngStream;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(n: usize, p: usize, k: usize, tau: f64) -> ValidSpec {
        ModelSpec::new(n, p, k, tau).validate().unwrap()
    }

    fn data(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, 0).rng();
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn plug(n: usize, p: usize, k: usize) -> PlugIn {
        PlugIn {
            beta: DMatrix::from_fn(p, k, |a, b| if a >= b { 0.5 + 0.1 * (a + b) as f64 } else { 0.0 }),
            sigma: DVector::from_fn(p, |j, _| 0.4 + 0.1 * j as f64),
            w: DVector::from_fn(n, |i, _| 0.5 + 0.01 * i as f64),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(5, 1), 10);
        assert_eq!(parameter_count(5, 2), 14);
        assert_relative_eq!(effective_n(150, 5, 2), 150.0 - 21.0 / 6.0 - 4.0 / 3.0, epsilon = 1e-12);
        assert!((effective_n(150, 5, 2) - 145.17).abs() < 0.01);
    }

    #[test]
    fn zero_loadings_loglik_by_hand() {
        // β = 0 at the median: every cell is an independent N(0, 8).
        let s = spec(3, 3, 1, 0.5);
        let p = PlugIn { beta: DMatrix::zeros(3, 1), sigma: DVector::from_element(3, 1.0), w: DVector::from_element(3, 1.0) };
        let y = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 2.0, 0.0, 1.0, -0.4, 5.0, 0.1, -2.2]);
        let expected: f64 = y.iter().map(|v| LN_2PI + 8f64.ln() + v * v / 8.0).sum();
        assert_relative_eq!(loglik_at(&p, &y, &s).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_data_doubles_l() {
        let (n, p, k) = (20, 4, 1);
        let y = data(n, p, 1);
        let pl = plug(n, p, k);
        let l1 = loglik_at(&pl, &y, &spec(n, p, k, 0.3)).unwrap();
        let y2 = DMatrix::from_fn(2 * n, p, |i, j| y[(i % n, j)]);
        let pl2 = PlugIn { w: DVector::from_fn(2 * n, |i, _| pl.w[i % n]), ..pl };
        let l2 = loglik_at(&pl2, &y2, &spec(2 * n, p, k, 0.3)).unwrap();
        assert_relative_eq!(l2, 2.0 * l1, max_relative = 1e-12);
    }

    #[test]
    fn scaling_shifts_l_by_jacobian() {
        let (n, p, k) = (15, 3, 1);
        let y = data(n, p, 2);
        let pl = plug(n, p, k);
        let s = spec(n, p, k, 0.7);
        let c = 2.5;
        let scaled = PlugIn { beta: &pl.beta * c, sigma: &pl.sigma * c, w: pl.w.clone() };
        let l0 = loglik_at(&pl, &y, &s).unwrap();
        let l1 = loglik_at(&scaled, &(&y * c), &s).unwrap();
        assert_relative_eq!(l1 - l0, 2.0 * (n * p) as f64 * c.ln(), max_relative = 1e-10);
    }

    #[test]
    fn icomp_penalty_values() {
        assert!(icomp_penalty(&DVector::from_element(4, 3.7), 2).unwrap().abs() < 1e-12);
        let d = DVector::from_vec(vec![1.0, 4.0]);
        // 2·2·[log 2.5 − ½ log 4]
        assert_relative_eq!(icomp_penalty(&d, 1).unwrap(), 4.0 * (2.5f64.ln() - 0.5 * 4f64.ln()), epsilon = 1e-12);
        assert!(icomp_penalty(&DVector::from_vec(vec![1.0, 0.0]), 1).is_err());
    }

    #[test]
    fn bic_star_undefined_for_tiny_n() {
        let s = spec(3, 3, 1, 0.5);
        let ic = information_criteria(10.0, &s, &DVector::from_element(3, 1.0)).unwrap();
        assert!(ic.bic_star.is_none());
        assert_eq!(ic.warnings.len(), 1);
    }

    #[test]
    fn criteria_are_internally_consistent() {
        let s = spec(150, 5, 2, 0.5);
        let ic = information_criteria(321.0, &s, &DVector::from_element(5, 2.0)).unwrap();
        assert_eq!(ic.aic, 321.0 + 28.0);
        assert_relative_eq!(ic.bic, 321.0 + 150f64.ln() * 14.0);
        assert_relative_eq!(ic.bic_star.unwrap(), 321.0 + ic.n_tilde.ln() * 14.0);
        assert_relative_eq!(ic.icomp, 321.0, epsilon = 1e-10);
        assert!(ic.aic < ic.bic);
    }

    #[test]
    fn degenerate_predictive_rps_is_mae() {
        let y = data(10, 3, 3);
        let pred = y.map(|v| v + 0.25 * v.signum());
        let reps = vec![pred.clone(); 4];
        let rps = rps_from_replicates(&reps, &reps, &y).unwrap();
        let (mae, _) = mae_mse_of(&pred, &y).unwrap();
        assert_relative_eq!(rps, mae, epsilon = 1e-15);
        assert_relative_eq!(mae, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn offsets() {
        let y = data(8, 2, 4);
        assert_eq!(mae_mse_of(&y, &y).unwrap(), (0.0, 0.0));
        let (mae, mse) = mae_mse_of(&y.add_scalar(-1.5), &y).unwrap();
        assert_relative_eq!(mae, 1.5, epsilon = 1e-12);
        assert_relative_eq!(mse, 2.25, epsilon = 1e-12);
    }

    #[test]
    fn loglik_is_order_invariant() {
        let (n, p, k) = (12, 3, 1);
        let y = data(n, p, 5);
        let pl = plug(n, p, k);
        let s = spec(n, p, k, 0.25);
        let perm: Vec<usize> = (0..n).map(|i| (7 * i + 3) % n).collect();
        let yp = DMatrix::from_fn(n, p, |i, j| y[(perm[i], j)]);
        let plp = PlugIn { w: DVector::from_fn(n, |i, _| pl.w[perm[i]]), ..pl.clone() };
        assert_relative_eq!(loglik_at(&pl, &y, &s).unwrap(), loglik_at(&plp, &yp, &s).unwrap(), max_relative = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn icomp_penalty_is_nonnegative(d in proptest::collection::vec(1e-3..1e3f64, 1..8), k in 0usize..4) {
            prop_assert!(icomp_penalty(&DVector::from_vec(d), k).unwrap() >= 0.0);
        }

        #[test]
        fn mae_squared_at_most_mse(seed in 0u64..10_000, shift in -3.0..3.0f64) {
            let y = data(6, 3, seed);
            let pred = data(6, 3, seed + 1).add_scalar(shift);
            let (mae, mse) = mae_mse_of(&pred, &y).unwrap();
            prop_assert!(mse >= 0.0);
            prop_assert!(mae * mae <= mse * (1.0 + 1e-12));
        }

        #[test]
        fn aic_below_bic_beyond_e_squared(n in 8usize..10_000, l in -1e4..1e4f64) {
            let s = spec(n, 3, 1, 0.5);
            let ic = information_criteria(l, &s, &DVector::from_element(3, 1.0)).unwrap();
            prop_assert!(ic.aic < ic.bic);
        }

        #[test]
        fn predictive_scores_are_order_invariant(seed in 0u64..1000) {
            let (n, p, t) = (7, 2, 3);
            let y = data(n, p, seed);
            let a: Vec<_> = (0..t).map(|r| data(n, p, seed + 10 + r as u64)).collect();
            let b: Vec<_> = (0..t).map(|r| data(n, p, seed + 20 + r as u64)).collect();
            let perm = |m: &DMatrix<f64>| DMatrix::from_fn(n, p, |i, j| m[((3 * i + 1) % n, j)]);
            let r0 = rps_from_replicates(&a, &b, &y).unwrap();
            let r1 = rps_from_replicates(
                &a.iter().map(perm).collect::<Vec<_>>(),
                &b.iter().map(perm).collect::<Vec<_>>(),
                &perm(&y),
            ).unwrap();
            prop_assert!((r0 - r1).abs() < 1e-12);
            let m0 = mae_mse_of(&a[0], &y).unwrap();
            let m1 = mae_mse_of(&perm(&a[0]), &perm(&y)).unwrap();
            prop_assert!((m0.0 - m1.0).abs() < 1e-12 && (m0.1 - m1.1).abs() < 1e-12);
        }
    }
}
