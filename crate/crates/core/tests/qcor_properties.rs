use qfm_core::diagnostics::ess;
use qfm_core::dists::RngStream;
use qfm_core::qcor::{fit_quantreg, quantile_correlation, QCorEstimate};
use qfm_core::{McmcConfig, PriorHyper, Tau};
use rand_distr::{Distribution, StandardNormal};

fn config() -> McmcConfig {
    McmcConfig { iterations: 2_500, burn_in: 500, thin: 2, chains: 1, ..McmcConfig::desk() }
}

fn normals(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, stream).rng();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn mc_se(est: &QCorEstimate) -> f64 {
    let n = est.draws.len() as f64;
    let var = est.draws.iter().map(|r| (r - est.mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / ess(&est.draws).unwrap().max(1.0)).sqrt()
}

/// The asymmetric Laplace working likelihood is misspecified for Gaussian
/// errors. At the median its posterior variance is `1/n` while the sampling
/// variance of the estimator is `π/(2n)`, so nominal 95% intervals cover with
/// probability `2Φ(1.96/√(π/2)) − 1 ≈ 0.882`. The count over 50 replications
/// must lie within three binomial standard deviations of that rate.
#[test]
fn slope_interval_coverage_matches_working_likelihood_theory() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let reps = 50;
    let mut covered = 0;
    for r in 0..reps {
        let x = normals(500, 100 + r, 0);
        let y = normals(500, 100 + r, 1);
        let post = fit_quantreg(&y, &x, Tau::MEDIAN, &PriorHyper::default(), &config(), RngStream::new(r, 9)).unwrap();
        let mut s = post.slopes();
        s.sort_by(f64::total_cmp);
        let lo = s[(0.025 * s.len() as f64) as usize];
        let hi = s[(0.975 * s.len() as f64) as usize];
        covered += (lo <= 0.0 && 0.0 <= hi) as usize;
    }
    let z = Normal::standard();
    let rate = 2.0 * z.cdf(1.96 / std::f64::consts::FRAC_PI_2.sqrt()) - 1.0;
    assert!((rate - 0.882).abs() < 1e-3);
    let expected = reps as f64 * rate;
    let sd = (reps as f64 * rate * (1.0 - rate)).sqrt();
    assert!((covered as f64 - expected).abs() <= 3.0 * sd, "{covered}/{reps}, expected {expected:.1} ± {:.1}", 3.0 * sd);
}

#[test]
fn independent_pair_is_near_zero() {
    let x = normals(500, 1, 0);
    let y = normals(500, 1, 1);
    let est = quantile_correlation(&x, &y, Tau::MEDIAN, &PriorHyper::default(), &config(), RngStream::new(2, 0)).unwrap();
    assert!(est.mean.abs() < 0.15, "{}", est.mean);
}

#[test]
fn location_scale_invariance() {
    let x = normals(300, 3, 0);
    let y: Vec<f64> = x.iter().zip(normals(300, 3, 1)).map(|(a, e)| 0.6 * a + e).collect();
    let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
    let p = PriorHyper::default();
    for tau in [0.25, 0.5, 0.75] {
        let tau = Tau::new(tau).unwrap();
        let a = quantile_correlation(&x, &y, tau, &p, &config(), RngStream::new(4, 0)).unwrap();
        let b = quantile_correlation(&x2, &y, tau, &p, &config(), RngStream::new(5, 0)).unwrap();
        let se = (mc_se(&a).powi(2) + mc_se(&b).powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 4.0 * se, "tau {}: {} vs {} (se {se})", tau.value(), a.mean, b.mean);
    }
}

#[test]
fn commutative_within_mc_error() {
    let x = normals(300, 6, 0);
    let y: Vec<f64> = x.iter().zip(normals(300, 6, 1)).map(|(a, e)| -0.8 * a + e).collect();
    let p = PriorHyper::default();
    let tau = Tau::new(0.4).unwrap();
    let a = quantile_correlation(&x, &y, tau, &p, &config(), RngStream::new(7, 0)).unwrap();
    let b = quantile_correlation(&y, &x, tau, &p, &config(), RngStream::new(8, 0)).unwrap();
    let se = (mc_se(&a).powi(2) + mc_se(&b).powi(2)).sqrt();
    assert!(a.mean < 0.0 && b.mean < 0.0);
    assert!((a.mean - b.mean).abs() < 4.0 * se, "{} vs {} (se {se})", a.mean, b.mean);
}

#[test]
fn positive_slopes_give_positive_draws() {
    let x = normals(200, 9, 0);
    let y: Vec<f64> = x.iter().zip(normals(200, 9, 1)).map(|(a, e)| 2.0 * a + 0.3 * e).collect();
    let est = quantile_correlation(&x, &y, Tau::new(0.7).unwrap(), &PriorHyper::default(), &config(), RngStream::new(10, 0)).unwrap();
    assert_eq!(est.negative_fraction, 0.0);
    assert!(est.draws.iter().all(|r| *r > 0.0));
}

/// Random-walk Metropolis directly on the asymmetric Laplace likelihood,
/// without the mixture representation.
fn direct_al_posterior(y: &[f64], x: &[f64], tau: f64, iters: usize, seed: u64) -> Vec<[f64; 3]> {
    use rand::Rng;
    let prior = PriorHyper::default();
    let check = |u: f64| u * (tau - if u < 0.0 { 1.0 } else { 0.0 });
    let log_post = |t: &[f64; 3]| {
        let sigma = t[2].exp();
        let eta = sigma.powi(-2);
        let ll: f64 = y
            .iter()
            .zip(x)
            .map(|(yi, xi)| (tau * (1.0 - tau) / sigma).ln() - check(yi - t[0] - t[1] * xi) / sigma)
            .sum();
        let lp_beta = -(t[0] * t[0] + t[1] * t[1]) / (2.0 * prior.c0);
        // Gamma prior on η, moved to log σ: log|dη/dlogσ| = log 2η.
        let lp_eta = (prior.nu / 2.0 - 1.0) * eta.ln() - prior.nu * prior.s2 / 2.0 * eta + (2.0 * eta).ln();
        ll + lp_beta + lp_eta
    };
    let mut rng = RngStream::new(seed, 0).rng();
    let mut cur = [0.0, 0.0, 0.0];
    let mut lp = log_post(&cur);
    let steps = [0.06, 0.06, 0.06];
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        for c in 0..3 {
            let mut prop = cur;
            let z: f64 = StandardNormal.sample(&mut rng);
            prop[c] += steps[c] * z;
            let lq = log_post(&prop);
            if rng.random::<f64>().ln() < lq - lp {
                cur = prop;
                lp = lq;
            }
        }
        out.push(cur);
    }
    out
}

#[test]
fn mixture_sampler_matches_direct_likelihood() {
    let n = 200;
    let x = normals(n, 11, 0);
    let y: Vec<f64> = x.iter().zip(normals(n, 11, 1)).map(|(a, e)| 0.5 + 0.7 * a + e).collect();
    for tau in [0.3, 0.5] {
        let direct = direct_al_posterior(&y, &x, tau, 60_000, 12);
        let direct = &direct[10_000..];
        let cfg = McmcConfig { iterations: 20_000, burn_in: 2_000, thin: 2, chains: 1, ..McmcConfig::desk() };
        let gibbs = fit_quantreg(&y, &x, Tau::new(tau).unwrap(), &PriorHyper::default(), &cfg, RngStream::new(13, 0)).unwrap();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            let se = sd / ess(v).unwrap().sqrt();
            (m, sd, se)
        };
        let d_slope: Vec<f64> = direct.iter().map(|t| t[1]).collect();
        let d_sigma: Vec<f64> = direct.iter().map(|t| t[2].exp()).collect();
        let g_sigma: Vec<f64> = gibbs.draws.iter().map(|d| d.sigma).collect();
        for (name, a, b) in [("slope", d_slope, gibbs.slopes()), ("sigma", d_sigma, g_sigma)] {
            let (ma, sa, ea) = stats(&a);
            let (mb, sb, eb) = stats(&b);
            let se = (ea * ea + eb * eb).sqrt();
            assert!((ma - mb).abs() < 4.0 * se, "tau {tau} {name} mean: direct {ma} vs mixture {mb} (se {se})");
            assert!((sa / sb - 1.0).abs() < 0.1, "tau {tau} {name} sd: direct {sa} vs mixture {sb}");
        }
    }
}
