use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::conditionals::{update_beta, update_f, update_sigma_gibbs, update_sigma_mh, update_w};
use super::tuning::{tune_proposals, DEFAULT_PROPOSAL_SD};
use super::{ChainOutput, McmcConfig, PosteriorSample, SigmaUpdate};
use crate::dists::RngStream;
use crate::error::{QfmError, Result};
use crate::model::{uniqueness_inflation, ChainState, ValidSpec};

/// Starting point for chain `chain`.
///
/// Loadings start at the leading principal components of the sample
/// covariance, rotated to lower-triangular form with a positive diagonal,
/// plus Gaussian jitter of sd `0.1 (1 + chain)` times each variable's
/// standard deviation, so later chains start more dispersed. Factors start at
/// the least-squares scores, scales at the residual spread deflated by the
/// uniqueness inflation, and weights at 1.
pub fn initial_state<R: Rng + ?Sized>(data: &DMatrix<f64>, spec: &ValidSpec, chain: usize, rng: &mut R) -> ChainState {
    let (n, p, k) = (spec.n, spec.p, spec.k);
    let means = data.row_mean();
    let centred = DMatrix::from_fn(n, p, |i, j| data[(i, j)] - means[j]);
    let cov = centred.transpose() * &centred / (n.max(2) - 1) as f64;
    let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(1e-12).sqrt()).collect();

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pcs = DMatrix::from_fn(p, k, |j, l| eig.eigenvectors[(j, order[l])] * eig.eigenvalues[order[l]].max(0.0).sqrt());
    // pcs = Rᵀ Qᵀ with Q orthogonal, so pcs Q = Rᵀ is lower triangular.
    let qr = pcs.transpose().qr();
    let mut beta = pcs * qr.q();

    let spread = 0.1 * (1 + chain) as f64;
    for j in 0..p {
        for l in 0..k {
            if l > j {
                beta[(j, l)] = 0.0;
                continue;
            }
            let z: f64 = StandardNormal.sample(rng);
            beta[(j, l)] += spread * sd[j] * z;
        }
        if j < k {
            beta[(j, j)] = beta[(j, j)].abs() + 1e-3;
        }
    }

    let btb = beta.transpose() * &beta + DMatrix::identity(k, k) * 1e-8;
    let f = match btb.cholesky() {
        Some(ch) => ch.solve(&(beta.transpose() * centred.transpose())).transpose(),
        None => DMatrix::zeros(n, k),
    };
    let inflation = uniqueness_inflation(spec.tau());
    let sigma = DVector::from_fn(p, |j, _| {
        let common: f64 = (0..k).map(|l| beta[(j, l)].powi(2)).sum();
        let resid = (cov[(j, j)] - common).max(0.05 * cov[(j, j)]).max(1e-8);
        (resid / inflation).sqrt()
    });
    ChainState { beta, f, sigma, w: DVector::from_element(n, 1.0) }
}

/// One full sweep in the order w, f, β rows, σ. Returns per-variable
/// acceptance flags for Metropolis scale moves (empty for Gibbs) and the
/// count of proposals rejected for a non-finite kernel.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    sigma_update: SigmaUpdate,
    proposal_sd: &[f64],
    rng: &mut R,
) -> Result<(Vec<bool>, usize)> {
    update_w(state, data, spec, rng)?;
    update_f(state, data, spec, rng)?;
    update_beta(state, data, spec, rng)?;
    match sigma_update {
        SigmaUpdate::Gibbs => {
            update_sigma_gibbs(state, data, spec, rng)?;
            Ok((Vec::new(), 0))
        }
        _ => {
            let out = update_sigma_mh(state, data, spec, proposal_sd, rng)?;
            Ok((out.accepted, out.nonfinite))
        }
    }
}

fn check_data(data: &DMatrix<f64>, spec: &ValidSpec) -> Result<()> {
    if data.nrows() != spec.n || data.ncols() != spec.p {
        return Err(QfmError::Dimension(format!(
            "data is {}x{} but the model expects n = {}, p = {}",
            data.nrows(),
            data.ncols(),
            spec.n,
            spec.p
        )));
    }
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(QfmError::Degenerate(format!("data contain a non-finite value ({v})")));
    }
    Ok(())
}

/// Run chain number `chain` on `stream`.
pub fn run_chain(
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    config: &McmcConfig,
    chain: usize,
    stream: RngStream,
) -> Result<ChainOutput> {
    config.validate()?;
    check_data(data, spec)?;
    let p = spec.p;
    let sigma_update = config.sigma_update.resolve(spec.tau())?;
    let mut proposal_sd = match &config.proposal_sd {
        Some(sd) if sd.len() == p => sd.clone(),
        Some(sd) => {
            return Err(QfmError::Dimension(format!("{} proposal scales for {p} variables", sd.len())));
        }
        None => vec![DEFAULT_PROPOSAL_SD; p],
    };

    let started = Instant::now();
    let mut rng = stream.rng();
    let mut state = initial_state(data, spec, chain, &mut rng);

    let mut draws = Vec::with_capacity(config.stored_per_chain());
    let mut stored_at = Vec::with_capacity(config.stored_per_chain());
    let mut window = vec![0usize; p];
    let mut window_len = 0usize;
    let mut round = 0usize;
    let mut last_window_rates: Option<Vec<f64>> = None;
    let mut accepted = vec![0usize; p];
    let mut nonfinite = 0usize;

    for t in 1..=config.iterations {
        let (flags, bad) = match sweep(&mut state, data, spec, sigma_update, &proposal_sd, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                return Err(QfmError::ChainFailed {
                    chain,
                    iteration: t,
                    source: Box::new(e),
                    partial_state: Box::new(state),
                })
            }
        };
        nonfinite += bad;

        if t <= config.burn_in {
            if !flags.is_empty() {
                for (c, f) in window.iter_mut().zip(&flags) {
                    *c += *f as usize;
                }
                window_len += 1;
                if window_len == config.adapt_window {
                    let rates: Vec<f64> = window.iter().map(|&c| c as f64 / window_len as f64).collect();
                    proposal_sd = tune_proposals(&proposal_sd, &rates, round, config.target_acceptance);
                    last_window_rates = Some(rates);
                    round += 1;
                    window.iter_mut().for_each(|c| *c = 0);
                    window_len = 0;
                }
            }
            continue;
        }

        for (c, f) in accepted.iter_mut().zip(&flags) {
            *c += *f as usize;
        }
        if (t - config.burn_in).is_multiple_of(config.thin) {
            draws.push(state.clone());
            stored_at.push(t);
        }
    }

    let post = (config.iterations - config.burn_in) as f64;
    let (acceptance, tuning_converged) = match sigma_update {
        SigmaUpdate::Gibbs => (vec![1.0; p], true),
        _ => {
            let (lo, hi) = config.target_acceptance;
            let converged = last_window_rates
                .as_ref()
                .is_some_and(|r| r.iter().all(|&a| a >= lo && a <= hi));
            (accepted.iter().map(|&c| c as f64 / post).collect(), converged)
        }
    };

    Ok(ChainOutput {
        stream,
        draws,
        iterations: stored_at,
        acceptance,
        proposal_sd,
        tuning_converged,
        nonfinite_rejections: nonfinite,
        sigma_update,
        elapsed: started.elapsed(),
    })
}

/// Run `config.chains` independent chains on streams `(seed, 0..chains)`.
/// Each chain's outcome is reported separately.
pub fn run_parallel_chains(data: &DMatrix<f64>, spec: &ValidSpec, config: &McmcConfig) -> Vec<Result<ChainOutput>> {
    if let Err(e) = config.validate() {
        return vec![Err(e)];
    }
    if config.chains == 1 {
        return vec![run_chain(data, spec, config, 0, RngStream::new(config.seed, 0))];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| {
                let stream = RngStream::new(config.seed, c as u64);
                scope.spawn(move || run_chain(data, spec, config, c, stream))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(QfmError::Numerical("chain thread panicked".into()))))
            .collect()
    })
}

/// Run all chains and merge them, failing if any chain failed.
pub fn fit(data: &DMatrix<f64>, spec: &ValidSpec, config: &McmcConfig) -> Result<PosteriorSample> {
    let chains = run_parallel_chains(data, spec, config).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSample { chains })
}
