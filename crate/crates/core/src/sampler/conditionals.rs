//! Full conditional distributions of the hierarchical model and the Gibbs /
//! Metropolis updates built on them.
//!
//! Conventions: `m_l = σ_l a_τ`, `δ_l = σ_l² b_τ²`, residual `r_il = y_il − β_l f_i`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::dists::{sample_truncnorm_pos, CanonicalGaussian, GigParams, Tau};
use crate::error::{QfmError, Result};
use crate::model::{ChainState, PriorHyper, ValidSpec};

fn residual(state: &ChainState, data: &DMatrix<f64>, i: usize, l: usize) -> f64 {
    let mut fit = 0.0;
    for j in 0..state.beta.ncols() {
        fit += state.beta[(l, j)] * state.f[(i, j)];
    }
    data[(i, l)] - fit
}

/// `w_i | · ~ GIG(1 − p/2, 2 + mᵀΔ⁻¹m, r_iᵀΔ⁻¹r_i)`.
pub fn w_conditional(state: &ChainState, data: &DMatrix<f64>, spec: &ValidSpec, i: usize) -> Result<GigParams> {
    let c = spec.constants();
    let p = data.ncols();
    let lambda = 1.0 - p as f64 / 2.0;
    // mᵀΔ⁻¹m = Σ σ_l² a² / (σ_l² b²) = p a² / b².
    let a = 2.0 + p as f64 * c.a * c.a / c.b2;
    let mut b = 0.0;
    for l in 0..p {
        let r = residual(state, data, i, l);
        b += r * r / (state.sigma[l] * state.sigma[l] * c.b2);
    }
    if b == 0.0 && lambda <= 0.0 {
        return Err(QfmError::Degenerate(format!(
            "observation {} is fitted exactly (zero residual) with p = {p}; the weight conditional is improper",
            i + 1
        )));
    }
    GigParams::new(lambda, a, b)
}

pub fn update_w<R: Rng + ?Sized>(state: &mut ChainState, data: &DMatrix<f64>, spec: &ValidSpec, rng: &mut R) -> Result<()> {
    for i in 0..data.nrows() {
        let g = w_conditional(state, data, spec, i)?;
        let w = g.sample(rng);
        if !(w > 0.0) || !w.is_finite() {
            return Err(QfmError::Numerical(format!("GIG draw {w} for observation {}", i + 1)));
        }
        state.w[i] = w;
    }
    Ok(())
}

/// `f_i | · ~ N(Ω βᵀ(w_iΔ)⁻¹(y_i − m w_i), Ω)`, `Ω⁻¹ = βᵀ(w_iΔ)⁻¹β + I`.
pub fn f_conditional(state: &ChainState, data: &DMatrix<f64>, spec: &ValidSpec, i: usize) -> CanonicalGaussian {
    let c = spec.constants();
    let (p, k) = state.beta.shape();
    let w = state.w[i];
    let mut precision = DMatrix::identity(k, k);
    let mut linear = DVector::zeros(k);
    for l in 0..p {
        let inv = 1.0 / (w * state.sigma[l] * state.sigma[l] * c.b2);
        let centred = data[(i, l)] - state.sigma[l] * c.a * w;
        for a in 0..k {
            let ba = state.beta[(l, a)] * inv;
            linear[a] += ba * centred;
            for b in 0..k {
                precision[(a, b)] += ba * state.beta[(l, b)];
            }
        }
    }
    CanonicalGaussian { precision, linear }
}

pub fn update_f<R: Rng + ?Sized>(state: &mut ChainState, data: &DMatrix<f64>, spec: &ValidSpec, rng: &mut R) -> Result<()> {
    for i in 0..data.nrows() {
        let draw = f_conditional(state, data, spec, i).sample(rng)?;
        state.f.set_row(i, &draw.transpose());
    }
    Ok(())
}

/// Canonical-form conditional of the free part of loading row `j` (0-based).
///
/// Rows `j < k` have `j + 1` free coefficients (the rest are fixed at zero);
/// rows `j ≥ k` have `k`. Precision is `C₀⁻¹ I + Σ_i f_i f_iᵀ / (w_i δ_j)`
/// and the linear term `Σ_i f_i (y_ij − m_j w_i) / (w_i δ_j)`, both over the
/// free coordinates.
pub fn beta_row_conditional(state: &ChainState, data: &DMatrix<f64>, spec: &ValidSpec, j: usize) -> CanonicalGaussian {
    let c = spec.constants();
    let k = state.beta.ncols();
    let d = free_coefficients(j, k);
    let delta = state.sigma[j] * state.sigma[j] * c.b2;
    let m = state.sigma[j] * c.a;
    let mut precision = DMatrix::identity(d, d) / spec.priors.c0;
    let mut linear = DVector::zeros(d);
    for i in 0..data.nrows() {
        let w = state.w[i];
        let inv = 1.0 / (w * delta);
        let centred = data[(i, j)] - m * w;
        for a in 0..d {
            let fa = state.f[(i, a)] * inv;
            linear[a] += fa * centred;
            for b in 0..d {
                precision[(a, b)] += fa * state.f[(i, b)];
            }
        }
    }
    CanonicalGaussian { precision, linear }
}

pub fn free_coefficients(row: usize, k: usize) -> usize {
    (row + 1).min(k)
}

/// Draw loading row `j`. For `j < k` the diagonal coordinate is constrained
/// positive: it is drawn from its truncated marginal and the remaining
/// coordinates from the Gaussian conditional given it.
pub fn update_beta_row<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    j: usize,
    rng: &mut R,
) -> Result<()> {
    let k = state.beta.ncols();
    let cond = beta_row_conditional(state, data, spec, j);
    let draw = if j < k {
        sample_constrained_row(&cond, rng)?
    } else {
        cond.sample(rng)?
    };
    for (a, v) in draw.iter().enumerate() {
        state.beta[(j, a)] = *v;
    }
    Ok(())
}

/// Sample a Gaussian whose last coordinate is restricted to be positive.
pub(crate) fn sample_constrained_row<R: Rng + ?Sized>(cond: &CanonicalGaussian, rng: &mut R) -> Result<DVector<f64>> {
    let d = cond.dim();
    let mean = cond.mean()?;
    let cov = cond.covariance()?;
    let last = d - 1;
    let diag = sample_truncnorm_pos(mean[last], cov[(last, last)], rng)?;
    let mut out = DVector::zeros(d);
    out[last] = diag;
    if d > 1 {
        // Conditional of the leading block given the last coordinate, in
        // canonical form: precision Q_rr, linear Q_rr μ_r − Q_r,last (x − μ_last).
        let q_rr = cond.precision.view((0, 0), (last, last)).into_owned();
        let q_rl = cond.precision.view((0, last), (last, 1)).column(0).into_owned();
        let mu_r = mean.rows(0, last).into_owned();
        let linear = &q_rr * mu_r - q_rl * (diag - mean[last]);
        let rest = CanonicalGaussian { precision: q_rr, linear }.sample(rng)?;
        out.rows_mut(0, last).copy_from(&rest);
    }
    Ok(out)
}

pub fn update_beta<R: Rng + ?Sized>(state: &mut ChainState, data: &DMatrix<f64>, spec: &ValidSpec, rng: &mut R) -> Result<()> {
    for j in 0..state.beta.nrows() {
        update_beta_row(state, data, spec, j, rng)?;
    }
    Ok(())
}

/// Unnormalized full conditional of a precision `η = σ⁻²`:
///
/// `η^((n+ν)/2 − 1) exp{−η (νs²/2 + τ(1−τ)/4 Σ r²/w)} exp{+√η (1−2τ)/2 Σ r}`.
///
/// The last factor comes from the cross term of the Gaussian kernel
/// `(r − σ a w)² / (2 w σ² b²)`; its sign is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionKernel {
    pub shape: f64,
    pub rate: f64,
    /// Coefficient on √η.
    pub linear: f64,
}

impl PrecisionKernel {
    /// Build from residual sums `Σ r_i²/w_i` and `Σ r_i` over `n` observations.
    pub fn new(n: usize, priors: &PriorHyper, tau: Tau, sum_sq_over_w: f64, sum_resid: f64) -> Self {
        let t = tau.value();
        Self {
            shape: (n as f64 + priors.nu) / 2.0,
            rate: priors.nu * priors.s2 / 2.0 + t * (1.0 - t) / 4.0 * sum_sq_over_w,
            linear: (1.0 - 2.0 * t) / 2.0 * sum_resid,
        }
    }

    pub fn log_density(&self, precision: f64) -> f64 {
        if !(precision > 0.0) {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * precision.ln() - self.rate * precision + self.linear * precision.sqrt()
    }
}

/// The conditional kernel of `σ_j⁻²` in the factor model.
pub fn sigma_kernel(state: &ChainState, data: &DMatrix<f64>, spec: &ValidSpec, j: usize) -> PrecisionKernel {
    let mut ssq = 0.0;
    let mut sr = 0.0;
    for i in 0..data.nrows() {
        let r = residual(state, data, i, j);
        ssq += r * r / state.w[i];
        sr += r;
    }
    PrecisionKernel::new(data.nrows(), &spec.priors, spec.tau(), ssq, sr)
}

/// Random walk on `log σ⁻²` with step `N(0, sd²)`. Returns whether the move
/// was accepted and whether the proposal produced a non-finite kernel.
pub fn mh_precision_step<R: Rng + ?Sized>(kernel: &PrecisionKernel, current: f64, sd: f64, rng: &mut R) -> (f64, bool, bool) {
    let eps: f64 = StandardNormal.sample(rng);
    let proposal = current * (sd * eps).exp();
    // Target on the log scale carries the Jacobian η.
    let log_ratio = kernel.log_density(proposal) - kernel.log_density(current) + (proposal.ln() - current.ln());
    if !log_ratio.is_finite() {
        return (current, false, true);
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    if u.ln() < log_ratio {
        (proposal, true, false)
    } else {
        (current, false, false)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MhOutcome {
    pub accepted: Vec<bool>,
    pub nonfinite: usize,
}

/// Metropolis update of every σ_j.
pub fn update_sigma_mh<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &DMatrix<f64>,
    spec: &ValidSpec,
    proposal_sd: &[f64],
    rng: &mut R,
) -> Result<MhOutcome> {
    let p = state.sigma.len();
    if proposal_sd.len() != p {
        return Err(QfmError::Dimension(format!("{} proposal scales for {p} variables", proposal_sd.len())));
    }
    let mut out = MhOutcome { accepted: Vec::with_capacity(p), nonfinite: 0 };
    for (j, &sd) in proposal_sd.iter().enumerate() {
        let kernel = sigma_kernel(state, data, spec, j);
        let current = 1.0 / (state.sigma[j] * state.sigma[j]);
        let (next, accepted, nonfinite) = mh_precision_step(&kernel, current, sd, rng);
        state.sigma[j] = 1.0 / next.sqrt();
        out.accepted.push(accepted);
        out.nonfinite += nonfinite as usize;
    }
    Ok(out)
}

/// Exact Gamma update of every σ_j⁻², valid only at the median where the √η
/// term vanishes.
pub fn update_sigma_gibbs<R: Rng + ?Sized>(state: &mut ChainState, data: &DMatrix<f64>, spec: &ValidSpec, rng: &mut R) -> Result<()> {
    if !spec.tau().is_median() {
        return Err(QfmError::Contract(format!(
            "the closed-form scale update requires tau = 0.5, got {}",
            spec.tau().value()
        )));
    }
    for j in 0..state.sigma.len() {
        let kernel = sigma_kernel(state, data, spec, j);
        let precision = draw_gamma(kernel.shape, kernel.rate, rng)?;
        state.sigma[j] = 1.0 / precision.sqrt();
    }
    Ok(())
}

pub(crate) fn draw_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| QfmError::Numerical(format!("Gamma({shape}, rate {rate}): {e}")))?;
    let x = g.sample(rng);
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(QfmError::Numerical(format!("Gamma({shape}, rate {rate}) produced {x}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::RngStream;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;

    fn spec(n: usize, p: usize, k: usize, tau: f64) -> ValidSpec {
        ModelSpec::new(n, p, k, tau).validate().unwrap()
    }

    fn state(n: usize, p: usize, k: usize) -> ChainState {
        let mut beta = DMatrix::from_fn(p, k, |a, b| 0.3 + 0.1 * (a as f64) - 0.2 * b as f64);
        for a in 0..k {
            for b in (a + 1)..k {
                beta[(a, b)] = 0.0;
            }
            beta[(a, a)] = 1.0;
        }
        ChainState {
            beta,
            f: DMatrix::from_fn(n, k, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4),
            sigma: DVector::from_fn(p, |l, _| 0.5 + 0.1 * l as f64),
            w: DVector::from_fn(n, |i, _| 0.5 + (i % 3) as f64 * 0.4),
        }
    }

    #[test]
    fn w_conditional_parameters() {
        let s = spec(4, 3, 1, 0.5);
        let st = state(4, 3, 1);
        let data = DMatrix::from_fn(4, 3, |i, l| i as f64 - l as f64);
        let g = w_conditional(&st, &data, &s, 0).unwrap();
        assert_eq!(g.lambda, -0.5);
        assert_eq!(g.a, 2.0);

        let s2 = spec(4, 3, 1, 0.25);
        let g = w_conditional(&st, &data, &s2, 0).unwrap();
        let c = Tau::new(0.25).unwrap().constants();
        assert_relative_eq!(g.a, 2.0 + 3.0 * c.a * c.a / c.b2, epsilon = 1e-12);
    }

    #[test]
    fn w_conditional_rejects_exact_fit() {
        let s = spec(2, 3, 1, 0.5);
        let st = state(2, 3, 1);
        let mut data = DMatrix::zeros(2, 3);
        for l in 0..3 {
            data[(0, l)] = st.beta[(l, 0)] * st.f[(0, 0)];
        }
        assert!(matches!(w_conditional(&st, &data, &s, 0), Err(QfmError::Degenerate(_))));
    }

    #[test]
    fn f_conditional_scalar_case() {
        // k = 1, p = 1, β = 1, w = 1, δ = 1 (σ² b² = 1), m = 0, y = 2 -> N(1, 1/2).
        let tau = Tau::MEDIAN;
        let c = tau.constants();
        let st = ChainState {
            beta: DMatrix::from_element(1, 1, 1.0),
            f: DMatrix::zeros(1, 1),
            sigma: DVector::from_element(1, (1.0 / c.b2).sqrt()),
            w: DVector::from_element(1, 1.0),
        };
        // p = 1 cannot be validated as a factor model, so build the spec by hand.
        let s = ModelSpec::new(1, 3, 1, 0.5).validate().unwrap();
        let data = DMatrix::from_element(1, 1, 2.0);
        let g = f_conditional(&st, &data, &s, 0);
        assert_relative_eq!(g.mean().unwrap()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.covariance().unwrap()[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn f_conditional_prior_when_no_loadings() {
        let s = spec(3, 3, 1, 0.3);
        let mut st = state(3, 3, 1);
        st.beta.fill(0.0);
        let data = DMatrix::from_element(3, 3, 5.0);
        let g = f_conditional(&st, &data, &s, 1);
        assert_eq!(g.mean().unwrap()[0], 0.0);
        assert_eq!(g.covariance().unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn f_conditional_tends_to_prior_for_large_weight() {
        let s = spec(3, 3, 1, 0.3);
        let mut st = state(3, 3, 1);
        st.w[0] = 1e12;
        let data = DMatrix::from_element(3, 3, 5.0);
        let g = f_conditional(&st, &data, &s, 0);
        assert!((g.covariance().unwrap()[(0, 0)] - 1.0).abs() < 1e-9);
        // The y/w term vanishes but −m w/w does not.
        let c = s.constants();
        let limit: f64 = (0..3).map(|j| -st.beta[(j, 0)] * c.a / (st.sigma[j] * c.b2)).sum();
        assert!((g.mean().unwrap()[0] - limit).abs() < 1e-9);
    }

    #[test]
    fn beta_row_without_data_is_prior() {
        let s = ModelSpec::new(0, 3, 1, 0.5);
        // n = 0 is rejected by validation; build the conditional with n = 1 and
        // an empty data matrix instead.
        let s = ModelSpec { n: 1, ..s }.validate().unwrap();
        let st = state(0, 3, 1);
        let data = DMatrix::zeros(0, 3);
        let g = beta_row_conditional(&st, &data, &s, 2);
        assert_eq!(g.mean().unwrap()[0], 0.0);
        assert_eq!(g.covariance().unwrap()[(0, 0)], 100.0);
        let mut rng = RngStream::new(2, 0).rng();
        let mut st = st;
        for _ in 0..200 {
            update_beta_row(&mut st, &data, &s, 0, &mut rng).unwrap();
            assert!(st.beta[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn beta_row_least_squares_limit() {
        // k = 1, j = 1, f = 1, w = 1, δ = 1, m = 0, C₀ → ∞: mean -> sample mean of y.
        let tau = Tau::MEDIAN;
        let c = tau.constants();
        let n = 6;
        let st = ChainState {
            beta: DMatrix::from_element(3, 1, 1.0),
            f: DMatrix::from_element(n, 1, 1.0),
            sigma: DVector::from_element(3, (1.0 / c.b2).sqrt()),
            w: DVector::from_element(n, 1.0),
        };
        let s = ModelSpec::new(n, 3, 1, 0.5)
            .with_priors(PriorHyper { c0: 1e12, nu: 0.02, s2: 1.0 })
            .validate()
            .unwrap();
        let ys = [1.0, 2.5, 0.5, 3.0, 2.0, 1.0];
        let data = DMatrix::from_fn(n, 3, |i, _| ys[i]);
        let g = beta_row_conditional(&st, &data, &s, 0);
        assert_relative_eq!(g.mean().unwrap()[0], 10.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn constrained_row_draws_keep_positive_diagonal() {
        let g = CanonicalGaussian {
            precision: DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.5]),
            linear: DVector::from_vec(vec![0.5, -3.0]),
        };
        let mut rng = RngStream::new(4, 0).rng();
        for _ in 0..5000 {
            let x = sample_constrained_row(&g, &mut rng).unwrap();
            assert!(x[1] > 0.0);
        }
    }

    #[test]
    fn constrained_row_matches_rejection_oracle() {
        // Oracle: draw the unconstrained Gaussian and keep draws with a positive
        // last coordinate.
        let g = CanonicalGaussian {
            precision: DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.5]),
            linear: DVector::from_vec(vec![0.5, 0.2]),
        };
        let mut rng = RngStream::new(8, 0).rng();
        let n = 100_000;
        let mut direct = [0.0; 2];
        for _ in 0..n {
            let x = sample_constrained_row(&g, &mut rng).unwrap();
            direct[0] += x[0] / n as f64;
            direct[1] += x[1] / n as f64;
        }
        let mut oracle = [0.0; 2];
        let mut kept = 0usize;
        while kept < n {
            let x = g.sample(&mut rng).unwrap();
            if x[1] > 0.0 {
                oracle[0] += x[0];
                oracle[1] += x[1];
                kept += 1;
            }
        }
        for a in 0..2 {
            oracle[a] /= n as f64;
            // Both estimators have sd below 1; allow four combined standard errors.
            assert!((direct[a] - oracle[a]).abs() < 4.0 * (2.0 / n as f64).sqrt(), "{direct:?} vs {oracle:?}");
        }
    }

    #[test]
    fn gibbs_shape_and_contract() {
        let k = PrecisionKernel::new(150, &PriorHyper::default(), Tau::MEDIAN, 3.0, 1.0);
        assert_relative_eq!(k.shape, 75.01, epsilon = 1e-12);
        assert_eq!(k.linear, 0.0);
        assert_relative_eq!(k.rate, 0.01 + 3.0 / 16.0, epsilon = 1e-12);
        let k = PrecisionKernel::new(0, &PriorHyper::default(), Tau::MEDIAN, 0.0, 0.0);
        assert_relative_eq!(k.shape, 0.01);
        assert_relative_eq!(k.rate, 0.01);

        let s = spec(3, 3, 1, 0.3);
        let mut st = state(3, 3, 1);
        let data = DMatrix::zeros(3, 3);
        let mut rng = RngStream::new(1, 0).rng();
        assert!(matches!(update_sigma_gibbs(&mut st, &data, &s, &mut rng), Err(QfmError::Contract(_))));
    }

    #[test]
    fn tiny_proposal_is_always_accepted() {
        let k = PrecisionKernel::new(50, &PriorHyper::default(), Tau::new(0.2).unwrap(), 20.0, 4.0);
        let mut rng = RngStream::new(3, 0).rng();
        let mut x = 2.0;
        let mut acc = 0;
        for _ in 0..1000 {
            let (nx, a, _) = mh_precision_step(&k, x, 1e-9, &mut rng);
            x = nx;
            acc += a as usize;
        }
        assert!(acc >= 995, "{acc}");
    }
}
