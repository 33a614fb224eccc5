//! Seeded data generators: the two simulation designs used to exercise the
//! model, and direct simulation from a quantile factor model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dists::{cholesky_lower, sample_mvn, RngStream};
use crate::error::{QfmError, Result};
use crate::model::{ChainState, ModelSpec};

/// Contamination threshold of the tail-dependence design.
pub const CASE1_THRESHOLD: f64 = -0.4;
pub const CASE1_CONTAMINATION_VAR: f64 = 9.0;
pub const CASE2_DOF: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScenarioConfig {
    Case1 { n: usize, seed: u64 },
    Case2 { n: usize, seed: u64 },
    Qfm { spec: ModelSpec, truth: ChainState, seed: u64 },
}

impl ScenarioConfig {
    pub fn generate(&self) -> Result<DMatrix<f64>> {
        match self {
            ScenarioConfig::Case1 { n, seed } => gen_case1(*n, *seed),
            ScenarioConfig::Case2 { n, seed } => gen_case2(*n, *seed),
            ScenarioConfig::Qfm { spec, truth, seed } => gen_qfm(spec, truth, *seed).map(|(d, _)| d),
        }
    }
}

fn case1_covariance() -> DMatrix<f64> {
    let mut psi = DMatrix::identity(5, 5);
    for a in 2..5 {
        for b in 2..5 {
            if a != b {
                psi[(a, b)] = 0.95;
            }
        }
    }
    psi
}

fn case2_scale() -> DMatrix<f64> {
    let mut s = DMatrix::identity(6, 6);
    for pair in [(0, 1), (2, 3), (4, 5)] {
        s[pair] = 0.95;
        s[(pair.1, pair.0)] = 0.95;
    }
    s
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(QfmError::Domain(format!("at least 2 observations are needed, got {n}")));
    }
    Ok(())
}

/// Five Gaussian variables (3–5 strongly correlated) where variables 1 and 2
/// receive a shared N(0, 9) shock whenever both fall below −0.4.
pub fn gen_case1(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    gen_case1_with(n, seed, CASE1_CONTAMINATION_VAR)
}

/// [`gen_case1`] with an explicit contamination variance. Both indicators are
/// evaluated on the values before the shock.
pub fn gen_case1_with(n: usize, seed: u64, contamination_var: f64) -> Result<DMatrix<f64>> {
    check_n(n)?;
    if !(contamination_var >= 0.0) {
        return Err(QfmError::Domain(format!("contamination variance {contamination_var} is negative")));
    }
    let chol = cholesky_lower(&case1_covariance())?;
    let mut rng = RngStream::new(seed, 0).rng();
    let zero = DVector::zeros(5);
    let sd = contamination_var.sqrt();
    let mut out = DMatrix::zeros(n, 5);
    for i in 0..n {
        let mut y = sample_mvn(&zero, &chol, &mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        if y[0] < CASE1_THRESHOLD && y[1] < CASE1_THRESHOLD {
            let e = sd * z;
            y[0] += e;
            y[1] += e;
        }
        out.set_row(i, &y.transpose());
    }
    Ok(out)
}

/// Six-variate Student-t with 2.5 degrees of freedom and three 0.95-coupled pairs.
pub fn gen_case2(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_n(n)?;
    let chol = cholesky_lower(&case2_scale())?;
    let chi = ChiSquared::new(CASE2_DOF).expect("positive degrees of freedom");
    let mut rng = RngStream::new(seed, 0).rng();
    let zero = DVector::zeros(6);
    let mut out = DMatrix::zeros(n, 6);
    for i in 0..n {
        let z = sample_mvn(&zero, &chol, &mut rng);
        let g: f64 = chi.sample(&mut rng);
        out.set_row(i, &(z / (g / CASE2_DOF).sqrt()).transpose());
    }
    Ok(out)
}

/// Simulate `y_i = β f_i + m w_i + √w_i Δ^(1/2) z_i` with `f_i ~ N(0, I)` and
/// `w_i ~ Exp(1)`. The returned truth carries the supplied β and σ with the
/// simulated f and w.
pub fn gen_qfm(spec: &ModelSpec, truth: &ChainState, seed: u64) -> Result<(DMatrix<f64>, ChainState)> {
    let valid = spec.validate()?;
    let (n, p, k) = (spec.n, spec.p, spec.k);
    if truth.beta.shape() != (p, k) || truth.sigma.len() != p {
        return Err(QfmError::Dimension(format!(
            "truth has beta {:?} and {} scales, expected ({p}, {k}) and {p}",
            truth.beta.shape(),
            truth.sigma.len()
        )));
    }
    if truth.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(QfmError::Domain("true scales must be positive".into()));
    }
    let c = valid.constants();
    let mut rng = RngStream::new(seed, 0).rng();
    let mut f = DMatrix::zeros(n, k);
    let mut w = DVector::zeros(n);
    let mut data = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..k {
            f[(i, j)] = rng.sample(StandardNormal);
        }
        let wi: f64 = Exp1.sample(&mut rng);
        w[i] = wi;
        for l in 0..p {
            let z: f64 = StandardNormal.sample(&mut rng);
            let common: f64 = (0..k).map(|j| truth.beta[(l, j)] * f[(i, j)]).sum();
            let s = truth.sigma[l];
            data[(i, l)] = common + s * c.a * wi + wi.sqrt() * s * c.b2.sqrt() * z;
        }
    }
    let record = ChainState { beta: truth.beta.clone(), f, sigma: truth.sigma.clone(), w };
    Ok((data, record))
}
