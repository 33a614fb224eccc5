//! Model algebra: specification records, identifiability, implied moments and
//! variance decompositions.

use std::fmt;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dists::{Tau, TauConstants};
use crate::error::{QfmError, Result};

/// Prior hyperparameters: `β ~ N(0, C₀)` (half-normal on the diagonal) and
/// `σ_j⁻² ~ Gamma(ν/2, rate νs²/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorHyper {
    pub c0: f64,
    pub nu: f64,
    pub s2: f64,
}

impl Default for PriorHyper {
    /// Vague defaults: C₀ = 100, ν = 0.02, s² = 1.
    fn default() -> Self {
        Self { c0: 100.0, nu: 0.02, s2: 1.0 }
    }
}

/// Unvalidated model specification, as read from user input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub tau: f64,
    #[serde(default)]
    pub priors: PriorHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpecViolation {
    NoObservations,
    NoVariables,
    NoFactors,
    TooManyFactors { k: usize, bound: usize, p: usize },
    QuantileOutOfRange(f64),
    NonPositivePrior { name: &'static str, value: f64 },
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::NoObservations => write!(f, "n must be at least 1"),
            SpecViolation::NoVariables => write!(f, "p must be at least 1"),
            SpecViolation::NoFactors => write!(f, "k must be at least 1"),
            SpecViolation::TooManyFactors { k, bound, p } => {
                write!(f, "k exceeds bound {bound} (k = {k}, p = {p})")
            }
            SpecViolation::QuantileOutOfRange(t) => write!(f, "tau = {t} is outside (0, 1)"),
            SpecViolation::NonPositivePrior { name, value } => {
                write!(f, "prior {name} = {value} must be positive")
            }
        }
    }
}

/// A specification that passed [`validate_spec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidSpec {
    spec: ModelSpec,
    tau: Tau,
}

impl ValidSpec {
    pub fn tau(&self) -> Tau {
        self.tau
    }

    pub fn constants(&self) -> TauConstants {
        self.tau.constants()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

impl Deref for ValidSpec {
    type Target = ModelSpec;
    fn deref(&self) -> &ModelSpec {
        &self.spec
    }
}

impl ModelSpec {
    pub fn new(n: usize, p: usize, k: usize, tau: f64) -> Self {
        Self { n, p, k, tau, priors: PriorHyper::default() }
    }

    pub fn with_priors(mut self, priors: PriorHyper) -> Self {
        self.priors = priors;
        self
    }

    pub fn validate(self) -> Result<ValidSpec> {
        validate_spec(&self).map_err(QfmError::InvalidSpec)
    }
}

/// Collects every violation rather than stopping at the first.
pub fn validate_spec(spec: &ModelSpec) -> std::result::Result<ValidSpec, Vec<SpecViolation>> {
    let mut v = Vec::new();
    if spec.n == 0 {
        v.push(SpecViolation::NoObservations);
    }
    if spec.p == 0 {
        v.push(SpecViolation::NoVariables);
    }
    if spec.k == 0 {
        v.push(SpecViolation::NoFactors);
    } else if spec.p > 0 {
        let bound = max_factors(spec.p);
        if spec.k > bound {
            v.push(SpecViolation::TooManyFactors { k: spec.k, bound, p: spec.p });
        }
    }
    let tau = Tau::new(spec.tau);
    if tau.is_err() {
        v.push(SpecViolation::QuantileOutOfRange(spec.tau));
    }
    for (name, value) in [("c0", spec.priors.c0), ("nu", spec.priors.nu), ("s2", spec.priors.s2)] {
        if !(value > 0.0) || !value.is_finite() {
            v.push(SpecViolation::NonPositivePrior { name, value });
        }
    }
    match tau {
        Ok(tau) if v.is_empty() => Ok(ValidSpec { spec: *spec, tau }),
        _ => Err(v),
    }
}

/// Largest k with `p(p+1)/2 − p(k+1) + k(k−1)/2 ≥ 0`.
pub fn max_factors(p: usize) -> usize {
    let p = p as i64;
    let slack = |k: i64| p * (p + 1) / 2 - p * (k + 1) + k * (k - 1) / 2;
    // The slack is decreasing in k on 0..=p.
    (1..=p).take_while(|&k| slack(k) >= 0).last().unwrap_or(0) as usize
}

/// Multiplier on σ_l² in the marginal variance: `(1 − 2τ + 2τ²) / (τ²(1−τ)²)`.
pub fn uniqueness_inflation(tau: Tau) -> f64 {
    let t = tau.value();
    (1.0 - 2.0 * t + 2.0 * t * t) / (t * t * (1.0 - t) * (1.0 - t))
}

/// One state of the Markov chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// p × k loadings, block lower triangular with positive diagonal.
    pub beta: DMatrix<f64>,
    /// n × k latent factors, one row per observation.
    pub f: DMatrix<f64>,
    /// Idiosyncratic scales σ_j.
    pub sigma: DVector<f64>,
    /// Mixture weights w_i.
    pub w: DVector<f64>,
}

impl ChainState {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.f.nrows(), self.beta.nrows(), self.beta.ncols())
    }

    /// Location vector `m_l = σ_l a_τ`.
    pub fn location(&self, c: TauConstants) -> DVector<f64> {
        self.sigma.map(|s| s * c.a)
    }

    /// Diagonal scatter `δ_ll = σ_l² b_τ²`.
    pub fn scatter(&self, c: TauConstants) -> DVector<f64> {
        self.sigma.map(|s| s * s * c.b2)
    }

    /// Checks shapes against the spec and the positivity/identifiability constraints.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let (n, p, k) = (spec.n, spec.p, spec.k);
        if self.beta.shape() != (p, k)
            || self.f.shape() != (n, k)
            || self.sigma.len() != p
            || self.w.len() != n
        {
            return Err(QfmError::Dimension(format!(
                "state shapes beta {:?}, f {:?}, sigma {}, w {} do not match (n={n}, p={p}, k={k})",
                self.beta.shape(),
                self.f.shape(),
                self.sigma.len(),
                self.w.len()
            )));
        }
        check_loadings(&self.beta)?;
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(QfmError::Domain(format!("sigma entry {s} is not positive")));
        }
        if let Some(w) = self.w.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(QfmError::Domain(format!("mixture weight {w} is not positive")));
        }
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(QfmError::Numerical("non-finite latent factor".into()));
        }
        Ok(())
    }
}

/// Block lower triangular with strictly positive diagonal on the leading k×k block.
pub fn check_loadings(beta: &DMatrix<f64>) -> Result<()> {
    let (p, k) = beta.shape();
    if k > p {
        return Err(QfmError::Dimension(format!("loadings have {k} columns but only {p} rows")));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(QfmError::Numerical("non-finite loading".into()));
    }
    for j in 0..k {
        if !(beta[(j, j)] > 0.0) {
            return Err(QfmError::Domain(format!("diagonal loading beta[{},{}] = {} must be positive", j + 1, j + 1, beta[(j, j)])));
        }
        for l in (j + 1)..k {
            if beta[(j, l)] != 0.0 {
                return Err(QfmError::Domain(format!("loading beta[{},{}] must be zero above the diagonal", j + 1, l + 1)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedMoments {
    /// Covariance of y marginal on the factors.
    pub marginal: DMatrix<f64>,
    /// Covariance of y given the factors.
    pub conditional: DMatrix<f64>,
}

/// `Cov(y) = ββᵀ + a_τ² σσᵀ + diag(σ² b_τ²)`; the conditional covariance drops ββᵀ.
pub fn implied_moments(beta: &DMatrix<f64>, sigma: &DVector<f64>, tau: Tau) -> ImpliedMoments {
    let c = tau.constants();
    let mut conditional = sigma * sigma.transpose() * (c.a * c.a);
    for l in 0..sigma.len() {
        conditional[(l, l)] += sigma[l] * sigma[l] * c.b2;
    }
    let marginal = beta * beta.transpose() + &conditional;
    ImpliedMoments { marginal, conditional }
}

/// Per-variable percentage of variance explained by each factor, with the row
/// total in the last column.
///
/// The standard form inflates the uniqueness by [`uniqueness_inflation`]; the
/// modified form uses σ_l² alone so that different quantiles are comparable.
pub fn variance_decomposition(
    beta: &DMatrix<f64>,
    sigma: &DVector<f64>,
    tau: Tau,
    modified: bool,
) -> Result<DMatrix<f64>> {
    let (p, k) = beta.shape();
    let inflation = if modified { 1.0 } else { uniqueness_inflation(tau) };
    let mut out = DMatrix::zeros(p, k + 1);
    for l in 0..p {
        let common: f64 = beta.row(l).iter().map(|b| b * b).sum();
        let denom = common + sigma[l] * sigma[l] * inflation;
        if !(denom > 0.0) {
            return Err(QfmError::Degenerate(format!(
                "variable {} has zero loadings and zero uniqueness",
                l + 1
            )));
        }
        for j in 0..k {
            out[(l, j)] = 100.0 * beta[(l, j)] * beta[(l, j)] / denom;
        }
        out[(l, k)] = 100.0 * common / denom;
    }
    Ok(out)
}

/// Log of the hierarchical joint density, up to an additive constant, with
/// the scale prior expressed on the precision σ_j⁻²:
///
/// `y_i | · ~ N(β f_i + m w_i, w_i Δ)`, `w_i ~ Exp(1)`, `f_i ~ N(0, I)`,
/// `β_jl ~ N(0, C₀)` with `β_jj > 0`, `σ_j⁻² ~ Gamma(ν/2, νs²/2)`.
///
/// Returns −∞ when a constrained diagonal loading is not positive.
pub fn log_joint(state: &ChainState, data: &DMatrix<f64>, spec: &ValidSpec) -> f64 {
    let c = spec.constants();
    let (n, p, k) = (data.nrows(), data.ncols(), spec.k);
    let m = state.location(c);
    let delta = state.scatter(c);
    let mut lp = 0.0;
    for i in 0..n {
        let w = state.w[i];
        for l in 0..p {
            let mut mu = m[l] * w;
            for j in 0..k {
                mu += state.beta[(l, j)] * state.f[(i, j)];
            }
            let r = data[(i, l)] - mu;
            lp -= 0.5 * (r * r / (w * delta[l]) + (w * delta[l]).ln());
        }
        lp -= w;
        lp -= 0.5 * state.f.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    let pr = spec.priors;
    for j in 0..p {
        let prec = 1.0 / (state.sigma[j] * state.sigma[j]);
        lp += (pr.nu / 2.0 - 1.0) * prec.ln() - pr.nu * pr.s2 / 2.0 * prec;
        for l in 0..k.min(j + 1) {
            lp -= state.beta[(j, l)].powi(2) / (2.0 * pr.c0);
        }
        if j < k && !(state.beta[(j, j)] > 0.0) {
            return f64::NEG_INFINITY;
        }
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tau(t: f64) -> Tau {
        Tau::new(t).unwrap()
    }

    /// Independent oracle: enumerate k and test the counting constraint directly.
    fn max_factors_bruteforce(p: usize) -> usize {
        let mut best = 0;
        for k in 0..=p {
            let free_params = (p * (p + 1)) as f64 / 2.0;
            let model_params = (p * (k + 1)) as f64 - (k * k.saturating_sub(1)) as f64 / 2.0;
            if free_params - model_params >= 0.0 {
                best = k;
            }
        }
        best
    }

    #[test]
    fn max_factors_examples() {
        assert_eq!(max_factors(5), 2);
        assert_eq!(max_factors(6), 3);
        assert_eq!(max_factors(1), 0);
        for p in 1..40 {
            assert_eq!(max_factors(p), max_factors_bruteforce(p), "p = {p}");
        }
    }

    #[test]
    fn inflation_values() {
        assert_eq!(uniqueness_inflation(tau(0.5)), 8.0);
        assert_relative_eq!(uniqueness_inflation(tau(0.1)), 0.82 / 0.0081, epsilon = 1e-10);
        assert!((uniqueness_inflation(tau(0.1)) - 101.234).abs() < 1e-3);
        assert_relative_eq!(uniqueness_inflation(tau(0.9)), uniqueness_inflation(tau(0.1)), epsilon = 1e-9);
    }

    #[test]
    fn inflation_is_a_squared_plus_b_squared() {
        for t in [0.05, 0.2, 0.5, 0.7, 0.99] {
            let c = tau(t).constants();
            assert_relative_eq!(uniqueness_inflation(tau(t)), c.a * c.a + c.b2, max_relative = 1e-12);
        }
    }

    #[test]
    fn implied_moments_examples() {
        let beta = DMatrix::zeros(1, 1);
        let sigma = DVector::from_element(1, 1.0);
        let m = implied_moments(&beta, &sigma, tau(0.5));
        assert_eq!(m.marginal[(0, 0)], 8.0);

        let beta = DMatrix::from_element(2, 1, 1.0);
        let sigma = DVector::from_element(2, 1.0);
        let m = implied_moments(&beta, &sigma, tau(0.5));
        assert_eq!(m.marginal[(0, 1)], 1.0);
        assert_eq!(m.conditional[(0, 1)], 0.0);
        assert_eq!(m.marginal[(0, 0)], 9.0);
    }

    #[test]
    fn variance_decomposition_examples() {
        let beta = DMatrix::from_element(1, 1, 1.0);
        let sigma = DVector::from_element(1, 1.0);
        let dv = variance_decomposition(&beta, &sigma, tau(0.5), false).unwrap();
        assert_relative_eq!(dv[(0, 1)], 100.0 / 9.0, epsilon = 1e-12);
        let dvm = variance_decomposition(&beta, &sigma, tau(0.5), true).unwrap();
        assert_relative_eq!(dvm[(0, 1)], 50.0, epsilon = 1e-12);

        let zero = DMatrix::zeros(1, 1);
        assert_eq!(variance_decomposition(&zero, &sigma, tau(0.3), false).unwrap()[(0, 1)], 0.0);
        let no_sigma = DVector::zeros(1);
        assert_eq!(variance_decomposition(&beta, &no_sigma, tau(0.3), false).unwrap()[(0, 1)], 100.0);
        assert!(matches!(
            variance_decomposition(&zero, &no_sigma, tau(0.3), false),
            Err(QfmError::Degenerate(_))
        ));
    }

    #[test]
    fn validate_spec_examples() {
        let errs = validate_spec(&ModelSpec::new(100, 5, 3, 0.5)).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("k exceeds bound 2"));
        assert!(validate_spec(&ModelSpec::new(100, 5, 2, 0.5)).is_ok());
        let errs = validate_spec(&ModelSpec::new(100, 5, 2, 1.0)).unwrap_err();
        assert_eq!(errs, vec![SpecViolation::QuantileOutOfRange(1.0)]);
        // Every problem is reported.
        let bad = ModelSpec::new(0, 5, 4, 0.0).with_priors(PriorHyper { c0: -1.0, nu: 0.0, s2: 1.0 });
        assert_eq!(validate_spec(&bad).unwrap_err().len(), 5);
        // p = 1 admits no factor.
        assert!(validate_spec(&ModelSpec::new(10, 1, 1, 0.5)).is_err());
    }

    #[test]
    fn loadings_constraint() {
        let mut beta = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.3, 0.5, -0.2, 0.1]);
        assert!(check_loadings(&beta).is_ok());
        beta[(0, 1)] = 0.1;
        assert!(check_loadings(&beta).is_err());
        beta[(0, 1)] = 0.0;
        beta[(1, 1)] = -0.5;
        assert!(check_loadings(&beta).is_err());
    }

    fn arb_loadings(p: usize, k: usize) -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
        (
            proptest::collection::vec(-3.0..3.0f64, p * k),
            proptest::collection::vec(0.0..2.0f64, p),
        )
            .prop_map(move |(b, s)| (DMatrix::from_vec(p, k, b), DVector::from_vec(s)))
    }

    proptest! {
        #[test]
        fn marginal_covariance_is_psd((beta, sigma) in arb_loadings(5, 2), t in 0.01..0.99f64) {
            let sigma = sigma.map(|s| s + 1e-3);
            let m = implied_moments(&beta, &sigma, tau(t));
            prop_assert!((&m.marginal - m.marginal.transpose()).abs().max() < 1e-12);
            prop_assert!(m.marginal.clone().cholesky().is_some());
        }

        #[test]
        fn decomposition_shares_sum_to_total((beta, sigma) in arb_loadings(4, 3), t in 0.01..0.99f64, modified: bool) {
            let sigma = sigma.map(|s| s + 1e-6);
            let dv = variance_decomposition(&beta, &sigma, tau(t), modified).unwrap();
            for l in 0..4 {
                let s: f64 = (0..3).map(|j| dv[(l, j)]).sum();
                prop_assert!((s - dv[(l, 3)]).abs() < 1e-10);
                prop_assert!(dv[(l, 3)] <= 100.0 && dv[(l, 3)] >= 0.0);
            }
        }

        #[test]
        fn inflation_is_symmetric(t in 0.001..0.999f64) {
            let a = uniqueness_inflation(tau(t));
            let b = uniqueness_inflation(tau(1.0 - t));
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }

        #[test]
        fn moments_invariant_under_rotation((beta, sigma) in arb_loadings(5, 2), angle in 0.0..6.3f64, t in 0.05..0.95f64) {
            let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
            let rotated = &beta * rot;
            let a = implied_moments(&beta, &sigma, tau(t));
            let b = implied_moments(&rotated, &sigma, tau(t));
            prop_assert!((&a.marginal - &b.marginal).abs().max() < 1e-10);
            prop_assert!((&a.conditional - &b.conditional).abs().max() < 1e-12);
        }
    }
}
