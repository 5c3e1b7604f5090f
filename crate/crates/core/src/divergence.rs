//! Closed-form J-divergence mathematics.
//!
//! The received signal `y = H A u + n` is a Gaussian mixture under each
//! hypothesis. Matching its first two moments gives single Gaussians with
//!
//! ```text
//! mu_i    = H A beta_i
//! Sigma_i = R + H A B_i A^T H^T
//! ```
//!
//! whose J-divergence has a closed form. For orthogonal channels the
//! objective decouples per sensor, and this module also provides that form,
//! its first and second derivatives, and the concavity region test.
//!
//! J values are in nats.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::scenario::{Allocation, Scenario, SensorProfile};

/// Covariances whose condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Tolerance on `C_0` below which a point counts as on the region boundary.
pub const REGION_BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("allocation has {got} entries but the channel has {expected} columns")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("covariance is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },
}

/// `beta_1 = [P_D(k)]`, `beta_0 = [P_F(k)]`, `beta = beta_1 - beta_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaVectors {
    pub beta1: DVector<f64>,
    pub beta0: DVector<f64>,
    pub beta: DVector<f64>,
}

impl BetaVectors {
    pub fn new(sensors: &[SensorProfile]) -> Self {
        let k = sensors.len();
        let beta1 = DVector::from_iterator(k, sensors.iter().map(|s| s.p_d));
        let beta0 = DVector::from_iterator(k, sensors.iter().map(|s| s.p_f));
        let beta = &beta1 - &beta0;
        BetaVectors { beta1, beta0, beta }
    }
}

/// Diagonal Bernoulli variances of the local decisions under each hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliVarMatrices {
    pub b1: DMatrix<f64>,
    pub b0: DMatrix<f64>,
}

impl BernoulliVarMatrices {
    pub fn new(sensors: &[SensorProfile]) -> Self {
        let k = sensors.len();
        let var = |p: f64| p * (1.0 - p);
        BernoulliVarMatrices {
            b1: DMatrix::from_diagonal(&DVector::from_iterator(k, sensors.iter().map(|s| var(s.p_d)))),
            b0: DMatrix::from_diagonal(&DVector::from_iterator(k, sensors.iter().map(|s| var(s.p_f)))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mu0: DVector<f64>,
    pub mu1: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
}

pub fn gaussian_moments(scenario: &Scenario, allocation: &Allocation) -> Result<GaussianMoments, DivergenceError> {
    let channel = scenario.channel();
    let k = channel.k();
    if allocation.p.len() != k {
        return Err(DivergenceError::DimensionMismatch {
            got: allocation.p.len(),
            expected: k,
        });
    }
    let betas = BetaVectors::new(scenario.sensors());
    let vars = BernoulliVarMatrices::new(scenario.sensors());
    // H A: scale column j of H by sqrt(P_j)
    let mut ha = channel.h().clone();
    for (j, a) in allocation.amplitudes().iter().enumerate() {
        ha.column_mut(j).scale_mut(*a);
    }
    let cov = |b: &DMatrix<f64>| {
        let mut s = channel.r() + &ha * b * ha.transpose();
        symmetrize(&mut s);
        s
    };
    Ok(GaussianMoments {
        mu0: &ha * &betas.beta0,
        mu1: &ha * &betas.beta1,
        sigma0: cov(&vars.b0),
        sigma1: cov(&vars.b1),
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Spectral condition number of a symmetric matrix; infinite when it is not
/// positive definite.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn checked_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, DivergenceError> {
    let condition = condition_number(m);
    if !(condition <= MAX_CONDITION) {
        return Err(DivergenceError::SingularCovariance { condition });
    }
    m.clone()
        .cholesky()
        .ok_or(DivergenceError::SingularCovariance { condition })
}

/// J-divergence between `N(mu1, Sigma1)` and `N(mu0, Sigma0)`:
///
/// ```text
/// J = 1/2 Tr[S0 S1^-1 + S1 S0^-1 + (S1^-1 + S0^-1) d d^T] - N,   d = mu1 - mu0
/// ```
///
/// evaluated as `1/2 Tr[(S0 - S1) S1^-1 + (S1 - S0) S0^-1] + 1/2 d^T (S1^-1 + S0^-1) d`
/// with Cholesky solves, which avoids cancelling the `-N`.
pub fn j_gaussian_mimo(moments: &GaussianMoments) -> Result<f64, DivergenceError> {
    let chol0 = checked_cholesky(&moments.sigma0)?;
    let chol1 = checked_cholesky(&moments.sigma1)?;
    let diff = &moments.sigma0 - &moments.sigma1;
    let t1 = chol1.solve(&diff).trace();
    let t0 = -chol0.solve(&diff).trace();
    let d = &moments.mu1 - &moments.mu0;
    let m1 = d.dot(&chol1.solve(&d));
    let m0 = d.dot(&chol0.solve(&d));
    Ok(0.5 * (t1 + t0 + m1 + m0))
}

/// Moment-matched J for an allocation on any channel.
pub fn j_approx(scenario: &Scenario, allocation: &Allocation) -> Result<f64, DivergenceError> {
    j_gaussian_mimo(&gaussian_moments(scenario, allocation)?)
}

/// Per-sensor coefficients of the decoupled orthogonal objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthCoeffs {
    pub alpha_f: f64,
    pub alpha_d: f64,
    pub beta_f: f64,
    pub beta_d: f64,
}

impl OrthCoeffs {
    /// `alpha_F - beta_F + alpha_D - beta_D`, which equals `2 (P_D - P_F)^2`.
    pub fn gap_sum(&self) -> f64 {
        self.alpha_f - self.beta_f + self.alpha_d - self.beta_d
    }
}

pub fn orth_coeffs(p_d: f64, p_f: f64) -> OrthCoeffs {
    OrthCoeffs {
        alpha_f: p_f * (1.0 - p_d) + p_d * (p_d - p_f),
        alpha_d: p_d * (1.0 - p_f) - p_f * (p_d - p_f),
        beta_f: p_d * (1.0 - p_d),
        beta_d: p_f * (1.0 - p_f),
    }
}

impl From<&SensorProfile> for OrthCoeffs {
    fn from(s: &SensorProfile) -> Self {
        orth_coeffs(s.p_d, s.p_f)
    }
}

/// One sensor's term of the orthogonal objective.
pub fn j_orthogonal_term(c: &OrthCoeffs, p: f64, g: f64, sigma2: f64) -> f64 {
    let x = g * p;
    (sigma2 + c.alpha_f * x) / (sigma2 + c.beta_f * x) + (sigma2 + c.alpha_d * x) / (sigma2 + c.beta_d * x)
}

/// Decoupled orthogonal objective
/// `sum_j [(s2 + aF g P)/(s2 + bF g P) + (s2 + aD g P)/(s2 + bD g P)]`.
///
/// This is `2 (J + K)` of the moment-matched J; it has the same maximiser.
pub fn j_orthogonal(p: &[f64], sensors: &[SensorProfile], gains: &[f64], sigma2: f64) -> f64 {
    p.iter()
        .zip(sensors)
        .zip(gains)
        .map(|((&p, s), &g)| j_orthogonal_term(&s.into(), p, g, sigma2))
        .sum()
}

/// `dJ/dP_j` of the orthogonal objective.
pub fn dj_dp(c: &OrthCoeffs, p: f64, g: f64, sigma2: f64) -> f64 {
    let x = g * p;
    let df = sigma2 + c.beta_f * x;
    let dd = sigma2 + c.beta_d * x;
    (c.alpha_f - c.beta_f) * sigma2 * g / (df * df) + (c.alpha_d - c.beta_d) * sigma2 * g / (dd * dd)
}

/// Marginal value at zero power, `2 g (P_D - P_F)^2 / sigma2`.
pub fn marginal_at_zero(p_d: f64, p_f: f64, g: f64, sigma2: f64) -> f64 {
    2.0 * g * (p_d - p_f).powi(2) / sigma2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondDerivative {
    pub value: f64,
    /// `C_0..C_3` of the numerator polynomial in `g P`.
    pub c: [f64; 4],
}

/// `d^2J/dP_j^2` of the orthogonal objective together with `C_0..C_3`.
///
/// The value is the exact derivative of [`dj_dp`]. Its sign equals the sign
/// of `-(C_0 s^6 + 3 C_1 s^4 x + 3 C_2 s^2 x^2 + C_3 x^3)` with `x = g P`.
pub fn d2j_dp2(c: &OrthCoeffs, p: f64, g: f64, sigma2: f64) -> SecondDerivative {
    let x = g * p;
    let df = sigma2 + c.beta_f * x;
    let dd = sigma2 + c.beta_d * x;
    let gf = c.alpha_f - c.beta_f;
    let gd = c.alpha_d - c.beta_d;
    let value = -2.0 * sigma2 * g * g * (gf * c.beta_f / df.powi(3) + gd * c.beta_d / dd.powi(3));
    let bfd = c.beta_f * c.beta_d;
    SecondDerivative {
        value,
        c: [
            c.beta_f * gf + c.beta_d * gd,
            bfd * (gf + gd),
            bfd * (c.beta_d * gf + c.beta_f * gd),
            bfd * (c.beta_d * c.beta_d * gf + c.beta_f * c.beta_f * gd),
        ],
    }
}

/// Coefficients of the first-derivative numerator `d0 s^4 + 2 d1 s^2 x + d2 x^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeNumerator {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn derivative_numerator(c: &OrthCoeffs) -> DerivativeNumerator {
    DerivativeNumerator {
        d0: c.gap_sum(),
        d1: c.alpha_f * c.beta_d + c.alpha_d * c.beta_f - 2.0 * c.beta_f * c.beta_d,
        d2: c.alpha_f * c.beta_d * c.beta_d + c.alpha_d * c.beta_f * c.beta_f
            - c.beta_f * c.beta_f * c.beta_d
            - c.beta_f * c.beta_d * c.beta_d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionS {
    pub inside: bool,
    pub r1: f64,
    pub r2: f64,
    /// Closed-form `C_0 = (P_D - P_F)^2 (-2 P_D^2 + (3 - 2 P_F) P_D + 3 P_F - 2 P_F^2 - 1)`.
    pub c0: f64,
}

/// Concavity region test: the orthogonal objective is concave in `P_j` for
/// every `P_j >= 0` iff `r1 <= P_D <= r2`.
pub fn in_region_s(p_d: f64, p_f: f64) -> RegionS {
    let root = (1.0 + 12.0 * p_f - 12.0 * p_f * p_f).sqrt();
    let mid = 0.75 - 0.5 * p_f;
    let r1 = mid - 0.25 * root;
    let r2 = mid + 0.25 * root;
    let q = -2.0 * p_d * p_d + (3.0 - 2.0 * p_f) * p_d + 3.0 * p_f - 2.0 * p_f * p_f - 1.0;
    let c0 = (p_d - p_f).powi(2) * q;
    let inside = (r1 <= p_d && p_d <= r2) || c0.abs() <= REGION_BOUNDARY_TOL;
    RegionS { inside, r1, r2, c0 }
}

/// J between the product-Bernoulli decision distributions `p(u|H1)` and
/// `p(u|H0)`; no allocation can push the received-signal J above it.
pub fn bernoulli_j_upper_bound(sensors: &[SensorProfile]) -> f64 {
    sensors
        .iter()
        .map(|s| {
            let delta = s.p_d - s.p_f;
            if delta == 0.0 {
                return 0.0;
            }
            delta * ((s.p_d * (1.0 - s.p_f)) / (s.p_f * (1.0 - s.p_d))).ln()
        })
        .sum()
}

/// `p(H0) p(H1) exp(-J/2)`, a lower bound on the Bayes error probability.
pub fn pe_lower_bound(j: f64, prior0: f64, prior1: f64) -> f64 {
    prior0 * prior1 * (-0.5 * j).exp()
}

/// The objective the allocators maximise: the decoupled form on orthogonal
/// channels, the moment-matched J otherwise.
pub fn approx_objective(scenario: &Scenario, allocation: &Allocation) -> Result<f64, DivergenceError> {
    match scenario.channel().orthogonal_parts() {
        Some((gains, sigma2)) => {
            if allocation.p.len() != gains.len() {
                return Err(DivergenceError::DimensionMismatch {
                    got: allocation.p.len(),
                    expected: gains.len(),
                });
            }
            Ok(j_orthogonal(&allocation.p, scenario.sensors(), gains, sigma2))
        }
        None => j_approx(scenario, allocation),
    }
}
