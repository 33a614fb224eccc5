//! Sampling and density primitives.
//!
//! Everything here is pure given a random generator. Generators are obtained
//! from an [`RngStream`], which pins a ChaCha8 keystream to a `(seed, stream)`
//! pair so that parallel consumers never overlap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{QfmError, Result};

/// Seed plus stream id; identical pairs reproduce identical draw sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Child stream `index` of this stream. Distinct `(stream, index)` pairs map
    /// to distinct streams as long as nesting stays below four levels and
    /// indices stay below 2^16.
    pub fn derive(&self, index: u64) -> RngStream {
        debug_assert!(index < (1 << 16) - 1);
        RngStream {
            seed: self.seed,
            stream: (self.stream << 16) | (index + 1),
        }
    }
}

/// Quantile level τ, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Tau(f64);

impl Tau {
    pub const MEDIAN: Tau = Tau(0.5);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Tau(tau))
        } else {
            Err(QfmError::Domain(format!("quantile {tau} is outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_median(self) -> bool {
        self.0 == 0.5
    }

    pub fn constants(self) -> TauConstants {
        let t = self.0;
        let v = t * (1.0 - t);
        TauConstants {
            a: (1.0 - 2.0 * t) / v,
            b2: 2.0 / v,
        }
    }
}

impl TryFrom<f64> for Tau {
    type Error = QfmError;
    fn try_from(v: f64) -> Result<Self> {
        Tau::new(v)
    }
}

impl From<Tau> for f64 {
    fn from(t: Tau) -> f64 {
        t.0
    }
}

/// Location and scale coefficients of the normal/exponential mixture:
/// `ε = σ a w + σ b √w z` with `w ~ Exp(1)` and `z ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauConstants {
    /// `(1 − 2τ) / (τ(1 − τ))`
    pub a: f64,
    /// `2 / (τ(1 − τ))`
    pub b2: f64,
}

pub fn tau_constants(tau: Tau) -> TauConstants {
    tau.constants()
}

/// Quantile check loss `u (τ − I(u < 0))`.
pub fn check_loss(u: f64, tau: Tau) -> f64 {
    let t = tau.value();
    if u < 0.0 {
        u * (t - 1.0)
    } else {
        u * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlUnivParams {
    pub location: f64,
    pub scale: f64,
    pub tau: Tau,
}

impl AlUnivParams {
    pub fn new(location: f64, scale: f64, tau: Tau) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(QfmError::Domain(format!("AL scale must be positive, got {scale}")));
        }
        Ok(Self { location, scale, tau })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        al_univ_logpdf(x, self)
    }

    /// Draw via the mixture representation; `P(X < location) = τ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let c = self.tau.constants();
        let w: f64 = Exp1.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        self.location + self.scale * (c.a * w + c.b2.sqrt() * w.sqrt() * z)
    }
}

pub fn al_univ_logpdf(x: f64, params: &AlUnivParams) -> f64 {
    let t = params.tau.value();
    (t * (1.0 - t) / params.scale).ln() - check_loss(x - params.location, params.tau) / params.scale
}

/// Multivariate asymmetric Laplace with diagonal scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct AlMultParams {
    pub location: DVector<f64>,
    /// Diagonal of the scatter matrix Δ.
    pub scatter: DVector<f64>,
}

impl AlMultParams {
    pub fn diagonal(location: DVector<f64>, scatter: DVector<f64>) -> Result<Self> {
        if location.len() != scatter.len() {
            return Err(QfmError::Dimension(format!(
                "location has length {} but scatter has length {}",
                location.len(),
                scatter.len()
            )));
        }
        if let Some(d) = scatter.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(QfmError::Domain(format!("scatter entry {d} is not a finite nonnegative value")));
        }
        Ok(Self { location, scatter })
    }

    /// Accepts a full matrix but only diagonal scatter is supported.
    pub fn from_matrix(location: DVector<f64>, scatter: &DMatrix<f64>) -> Result<Self> {
        let p = location.len();
        if scatter.nrows() != p || scatter.ncols() != p {
            return Err(QfmError::Dimension(format!(
                "scatter is {}x{}, expected {p}x{p}",
                scatter.nrows(),
                scatter.ncols()
            )));
        }
        for i in 0..p {
            for j in 0..p {
                if i != j && scatter[(i, j)] != 0.0 {
                    return Err(QfmError::Domain(format!(
                        "off-diagonal scatter entry ({i}, {j}) = {} must be zero",
                        scatter[(i, j)]
                    )));
                }
            }
        }
        Self::diagonal(location, scatter.diagonal())
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    /// `X = m W + √W V` with `W ~ Exp(1)`, `V ~ N(0, Δ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let w: f64 = Exp1.sample(rng);
        let sw = w.sqrt();
        DVector::from_fn(self.dim(), |l, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.location[l] * w + sw * self.scatter[l].sqrt() * z
        })
    }
}

pub fn sample_al_mult<R: Rng + ?Sized>(params: &AlMultParams, rng: &mut R) -> DVector<f64> {
    params.sample(rng)
}

/// Generalized inverse Gaussian with density ∝ `x^(λ−1) exp(−(a x + b / x) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
}

impl GigParams {
    pub fn new(lambda: f64, a: f64, b: f64) -> Result<Self> {
        if !lambda.is_finite() || !(a > 0.0) || !a.is_finite() || !(b >= 0.0) || !b.is_finite() {
            return Err(QfmError::Domain(format!("invalid GIG parameters (λ={lambda}, a={a}, b={b})")));
        }
        if b == 0.0 && lambda <= 0.0 {
            return Err(QfmError::Domain(format!(
                "GIG with b = 0 requires λ > 0, got λ = {lambda}"
            )));
        }
        Ok(Self { lambda, a, b })
    }

    /// Log density up to the normalizing constant.
    pub fn log_kernel(&self, x: f64) -> f64 {
        (self.lambda - 1.0) * x.ln() - 0.5 * (self.a * x + self.b / x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_gig(self, rng)
    }
}

/// Draw from a GIG law.
///
/// Reduces to the two-parameter form `y^(|λ|−1) exp(−ω (y + 1/y) / 2)` with
/// `ω = √(ab)` and rescales by `√(b/a)`, inverting for negative λ. The
/// standardized draw uses one of three rejection schemes depending on (|λ|, ω):
/// ratio-of-uniforms with mode shift, ratio-of-uniforms without shift, and a
/// piecewise constant/power/exponential envelope for small ω.
pub fn sample_gig<R: Rng + ?Sized>(params: &GigParams, rng: &mut R) -> f64 {
    let GigParams { lambda, a, b } = *params;
    let omega = (a * b).sqrt();
    if b == 0.0 || (lambda > 0.0 && omega < 1e-7) {
        // Gamma(λ, rate a/2); the correction factor exp(−b/2x) is ~1 here.
        return Gamma::new(lambda, 2.0 / a).expect("validated shape").sample(rng);
    }
    let alpha = (b / a).sqrt();
    let l = lambda.abs();
    let y = if l > 2.0 || omega > 3.0 {
        gig_rou_shift(l, omega, rng)
    } else if l >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        gig_rou_noshift(l, omega, rng)
    } else {
        gig_small_omega(l, omega, rng)
    };
    if lambda < 0.0 {
        alpha / y
    } else {
        alpha * y
    }
}

fn unit_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // (0, 1]
    1.0 - rng.random::<f64>()
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        ((lambda - 1.0) + ((lambda - 1.0).powi(2) + omega * omega).sqrt()) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn gig_rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * rng.random::<f64>();
        let v = unit_open(rng);
        let x = u / v;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // Extremal points of (x − xm)·√g(x) are the outer roots of a cubic.
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let phi = (-q / (2.0 * (-p * p * p / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (phi / 3.0).cos() - a / 3.0;
    let y2 = fak * (phi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    loop {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v = unit_open(rng);
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Envelope sampler for 0 ≤ λ < 1 and small ω.
fn gig_small_omega<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let log_g = |x: f64| (lambda - 1.0) * x.ln() - 0.5 * omega * (x + 1.0 / x);
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);

    // [0, x0]: constant at the mode height.
    let k0 = log_g(xm).exp();
    let a0 = k0 * x0;

    // [x0, 2/ω]: exp(−ω) x^(λ−1).  [max(x0, 2/ω), ∞): k2 exp(−ω x / 2).
    let (k1, a1, k2, a2) = if x0 >= 2.0 / omega {
        let k2 = x0.powf(lambda - 1.0);
        (0.0, 0.0, k2, k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega)
    } else {
        let k1 = (-omega).exp();
        let a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        let k2 = (2.0 / omega).powf(lambda - 1.0);
        (k1, a1, k2, k2 * 2.0 * (-1.0f64).exp() / omega)
    };
    let total = a0 + a1 + a2;
    let tail_start = x0.max(2.0 / omega);

    loop {
        let v = total * rng.random::<f64>();
        let (x, hx) = if v <= a0 {
            (x0 * v / a0, k0)
        } else if v <= a0 + a1 {
            let v = v - a0;
            if lambda == 0.0 {
                let x = omega * (v * omega.exp()).exp();
                (x, k1 / x)
            } else {
                let x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                (x, k1 * x.powf(lambda - 1.0))
            }
        } else {
            let v = v - (a0 + a1);
            let x = -2.0 / omega * ((-omega * tail_start / 2.0).exp() - omega / (2.0 * k2) * v).ln();
            (x, k2 * (-omega * x / 2.0).exp())
        };
        if !(x > 0.0) || !x.is_finite() {
            continue;
        }
        let u = unit_open(rng) * hx;
        if u.ln() <= log_g(x) {
            return x;
        }
    }
}

/// `N(mean, variance)` conditioned on the positive half-line.
pub fn sample_truncnorm_pos<R: Rng + ?Sized>(mean: f64, variance: f64, rng: &mut R) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() || !mean.is_finite() {
        return Err(QfmError::Domain(format!(
            "truncated normal needs finite mean and positive variance, got ({mean}, {variance})"
        )));
    }
    let sd = variance.sqrt();
    // Standardized lower bound.
    let lower = -mean / sd;
    let z = if lower < 1.0 {
        // Inverse CDF on [Φ(lower), 1); the upper tail mass is at least 0.158.
        let std = Normal::standard();
        let lo = std.cdf(lower);
        loop {
            let u = lo + (1.0 - lo) * rng.random::<f64>();
            let z = std.inverse_cdf(u);
            if z > lower && z.is_finite() {
                break z;
            }
        }
    } else {
        // Exponential proposal with the optimal rate.
        let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = lower + e / rate;
            let u = unit_open(rng);
            if u.ln() <= -0.5 * (z - rate).powi(2) {
                break z;
            }
        }
    };
    let x = mean + sd * z;
    // Guard the boundary against rounding.
    Ok(if x > 0.0 { x } else { f64::MIN_POSITIVE })
}

/// Gaussian in canonical form: precision `Q` and linear term `r`, so that the
/// mean is `Q⁻¹ r` and the covariance is `Q⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGaussian {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl CanonicalGaussian {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.precision
            .clone()
            .cholesky()
            .ok_or_else(|| QfmError::Numerical("precision matrix is not positive definite".into()))
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self.cholesky()?.solve(&self.linear))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(self.cholesky()?.inverse())
    }

    /// Log density including the normalizing constant.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self.cholesky()?;
        let mean = chol.solve(&self.linear);
        let d = x - mean;
        let quad = (&self.precision * &d).dot(&d);
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let k = self.dim() as f64;
        Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() - log_det + quad))
    }

    /// Draw `Q⁻¹ r + L⁻ᵀ z` where `Q = L Lᵀ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.cholesky()?;
        let mean = chol.solve(&self.linear);
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let offset = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| QfmError::Numerical("singular Cholesky factor".into()))?;
        Ok(mean + offset)
    }
}

/// Draw from `N(mean, cov)` via the lower Cholesky factor of `cov`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov_factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + cov_factor * z
}

/// Lower Cholesky factor, or a domain error when `m` is not positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| QfmError::Domain("matrix is not positive definite".into()))
}
