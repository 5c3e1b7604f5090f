//! Monte Carlo ground truth for the full chain `H_i -> u -> y`.
//!
//! Every replicate draws from its own ChaCha stream keyed by
//! `(seed, purpose)` with the replicate index as stream id, and reductions
//! run over index-ordered samples, so results do not depend on how many
//! threads rayon uses.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::divergence::{self, DivergenceError};
use crate::scenario::{Allocation, Scenario, SensorProfile};

/// Largest `K` for which the `2^K`-term mixture is enumerated.
pub const MAX_ENUMERATED_SENSORS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("{k} sensors exceed the 2^K mixture limit of {MAX_ENUMERATED_SENSORS}")]
    TooManySensors { k: usize },
    #[error("grid oracle needs exactly 2 sensors, got {k}")]
    GridNeedsTwoSensors { k: usize },
    #[error("invalid Monte Carlo configuration: {0}")]
    InvalidConfig(String),
    #[error("allocation has {got} entries, scenario has {expected} sensors")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("noise covariance is not positive definite")]
    NoiseNotPositiveDefinite,
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_runs: usize,
    pub seed: u64,
    /// Target false alarm probability at the fusion center.
    pub pf_target: f64,
}

impl McConfig {
    pub const MIN_RUNS: usize = 1000;

    pub fn new(n_runs: usize, seed: u64, pf_target: f64) -> Result<Self, McError> {
        if n_runs < Self::MIN_RUNS {
            return Err(McError::InvalidConfig(format!(
                "n_runs = {n_runs} is below the minimum of {}",
                Self::MIN_RUNS
            )));
        }
        if !(pf_target > 0.0 && pf_target < 1.0) {
            return Err(McError::InvalidConfig(format!("pf_target = {pf_target} must lie in (0, 1)")));
        }
        Ok(McConfig {
            n_runs,
            seed,
            pf_target,
        })
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_runs: 20_000,
            seed: 1,
            pf_target: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_runs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    H0,
    H1,
}

/// Purpose tags separating the random streams of different estimators.
pub mod purpose {
    pub const THRESHOLD: u64 = 0x7468_7265_7368;
    pub const DETECTION: u64 = 0x6465_7465_6374;
    pub const J_H0: u64 = 0x6a5f_6830;
    pub const J_H1: u64 = 0x6a5f_6831;
    pub const MOMENTS_H0: u64 = 0x6d6f_6d30;
    pub const MOMENTS_H1: u64 = 0x6d6f_6d31;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for replicate `index` of estimator `purpose`.
pub fn replicate_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ purpose.rotate_left(32);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Sum with pairwise splitting; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = if xs.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Independent Bernoulli local decisions: success probability `P_F` under
/// `H0`, `P_D` under `H1`.
pub fn draw_decisions<R: Rng>(sensors: &[SensorProfile], hypothesis: Hypothesis, rng: &mut R) -> Vec<bool> {
    sensors
        .iter()
        .map(|s| {
            let p = match hypothesis {
                Hypothesis::H0 => s.p_f,
                Hypothesis::H1 => s.p_d,
            };
            rng.random::<f64>() < p
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone)]
enum LlrKernel {
    /// Diagonal `H` and `R`: the likelihood factors over sensors.
    Factorized { amp: Vec<f64>, var: Vec<f64> },
    /// Whitened component means `L^-1 H A u` for every `u`.
    Enumerated { means: Vec<DVector<f64>> },
}

/// The signal chain for one scenario and allocation: decision draws,
/// received-signal draws and the fusion center's log-likelihood ratio.
#[derive(Debug, Clone)]
pub struct SignalModel {
    sensors: Vec<SensorProfile>,
    ha: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    kernel: LlrKernel,
    log_pd: Vec<f64>,
    log_1m_pd: Vec<f64>,
    log_pf: Vec<f64>,
    log_1m_pf: Vec<f64>,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

impl SignalModel {
    pub fn new(scenario: &Scenario, allocation: &Allocation) -> Result<Self, McError> {
        Self::build(scenario, allocation, false)
    }

    /// Always enumerates all `2^K` mixture components, even for diagonal channels.
    pub fn enumerated(scenario: &Scenario, allocation: &Allocation) -> Result<Self, McError> {
        Self::build(scenario, allocation, true)
    }

    fn build(scenario: &Scenario, allocation: &Allocation, force_enumeration: bool) -> Result<Self, McError> {
        let k = scenario.k();
        if allocation.p.len() != k {
            return Err(McError::DimensionMismatch {
                got: allocation.p.len(),
                expected: k,
            });
        }
        let channel = scenario.channel();
        let mut ha = channel.h().clone();
        for (j, a) in allocation.amplitudes().iter().enumerate() {
            ha.column_mut(j).scale_mut(*a);
        }
        let chol = channel
            .r()
            .clone()
            .cholesky()
            .ok_or(McError::NoiseNotPositiveDefinite)?;
        let chol_l = chol.l();
        let factorized = !force_enumeration && is_diagonal(channel.h()) && is_diagonal(channel.r());
        let kernel = if factorized {
            LlrKernel::Factorized {
                amp: (0..k).map(|j| ha[(j, j)]).collect(),
                var: (0..k).map(|j| channel.r()[(j, j)]).collect(),
            }
        } else {
            if k > MAX_ENUMERATED_SENSORS {
                return Err(McError::TooManySensors { k });
            }
            let means = (0..1usize << k)
                .map(|bits| {
                    let u = DVector::from_iterator(k, (0..k).map(|j| ((bits >> j) & 1) as f64));
                    let m = &ha * u;
                    chol.l().solve_lower_triangular(&m).expect("triangular solve")
                })
                .collect();
            LlrKernel::Enumerated { means }
        };
        let sensors = scenario.sensors().to_vec();
        Ok(SignalModel {
            log_pd: sensors.iter().map(|s| ln_or_neg_inf(s.p_d)).collect(),
            log_1m_pd: sensors.iter().map(|s| ln_or_neg_inf(1.0 - s.p_d)).collect(),
            log_pf: sensors.iter().map(|s| ln_or_neg_inf(s.p_f)).collect(),
            log_1m_pf: sensors.iter().map(|s| ln_or_neg_inf(1.0 - s.p_f)).collect(),
            sensors,
            ha,
            chol_l,
            kernel,
        })
    }

    pub fn draw_decisions<R: Rng>(&self, hypothesis: Hypothesis, rng: &mut R) -> Vec<bool> {
        draw_decisions(&self.sensors, hypothesis, rng)
    }

    /// `y = H A u + n`, `n ~ N(0, R)` coloured through the Cholesky factor of `R`.
    pub fn draw_received<R: Rng>(&self, u: &[bool], rng: &mut R) -> DVector<f64> {
        let n = self.ha.nrows();
        let mut y = DVector::zeros(n);
        for (j, &bit) in u.iter().enumerate() {
            if bit {
                y += self.ha.column(j);
            }
        }
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        y + &self.chol_l * z
    }

    /// `log p(y|H1) - log p(y|H0)` of the exact Gaussian-mixture likelihoods.
    pub fn log_lr(&self, y: &DVector<f64>) -> f64 {
        match &self.kernel {
            LlrKernel::Factorized { amp, var } => {
                let mut total = 0.0;
                for j in 0..amp.len() {
                    let e1 = -(y[j] - amp[j]).powi(2) / (2.0 * var[j]);
                    let e0 = -y[j] * y[j] / (2.0 * var[j]);
                    let num = log_sum_exp(&[self.log_pd[j] + e1, self.log_1m_pd[j] + e0]);
                    let den = log_sum_exp(&[self.log_pf[j] + e1, self.log_1m_pf[j] + e0]);
                    total += num - den;
                }
                total
            }
            LlrKernel::Enumerated { means } => {
                let z = self
                    .chol_l
                    .solve_lower_triangular(y)
                    .expect("triangular solve");
                let k = self.sensors.len();
                let mut l1 = Vec::with_capacity(means.len());
                let mut l0 = Vec::with_capacity(means.len());
                for (bits, m) in means.iter().enumerate() {
                    let q = -0.5 * (&z - m).norm_squared();
                    let (mut p1, mut p0) = (q, q);
                    for j in 0..k {
                        if (bits >> j) & 1 == 1 {
                            p1 += self.log_pd[j];
                            p0 += self.log_pf[j];
                        } else {
                            p1 += self.log_1m_pd[j];
                            p0 += self.log_1m_pf[j];
                        }
                    }
                    l1.push(p1);
                    l0.push(p0);
                }
                log_sum_exp(&l1) - log_sum_exp(&l0)
            }
        }
    }

    /// One replicate: decisions, received vector, log-LR.
    pub fn sample_log_lr<R: Rng>(&self, hypothesis: Hypothesis, rng: &mut R) -> f64 {
        let u = self.draw_decisions(hypothesis, rng);
        let y = self.draw_received(&u, rng);
        self.log_lr(&y)
    }

    /// Log-LR of `n` replicates drawn from stream `(seed, purpose)`, in index order.
    pub fn log_lr_samples(&self, hypothesis: Hypothesis, n: usize, seed: u64, purpose: u64) -> Vec<f64> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(seed, purpose, i);
                self.sample_log_lr(hypothesis, &mut rng)
            })
            .collect()
    }
}

pub fn draw_received<R: Rng>(
    scenario: &Scenario,
    allocation: &Allocation,
    u: &[bool],
    rng: &mut R,
) -> Result<DVector<f64>, McError> {
    Ok(SignalModel::new(scenario, allocation)?.draw_received(u, rng))
}

pub fn fc_log_lr(y: &DVector<f64>, scenario: &Scenario, allocation: &Allocation) -> Result<f64, McError> {
    Ok(SignalModel::new(scenario, allocation)?.log_lr(y))
}

fn tie_band(threshold: f64) -> f64 {
    1e-12 * threshold.abs().max(1.0)
}

/// Fusion-center detection probability of the Neyman-Pearson test at
/// `pf_target`.
///
/// The threshold is the lower order statistic at the `1 - pf_target`
/// quantile of `H0` log-LR samples; samples within `1e-12` (relative) of the
/// threshold are ties and are accepted with the randomisation weight that
/// makes the empirical false alarm rate exactly `pf_target`. `H0` and `H1`
/// samples come from disjoint streams.
pub fn estimate_pd_fc(scenario: &Scenario, allocation: &Allocation, mc: &McConfig) -> Result<McEstimate, McError> {
    let model = SignalModel::new(scenario, allocation)?;
    Ok(pd_fc_with_model(&model, mc))
}

fn pd_fc_with_model(model: &SignalModel, mc: &McConfig) -> McEstimate {
    let n = mc.n_runs;
    let mut null = model.log_lr_samples(Hypothesis::H0, n, mc.seed, purpose::THRESHOLD);
    null.sort_by(f64::total_cmp);
    let rank = (((1.0 - mc.pf_target) * n as f64).ceil() as usize).clamp(1, n) - 1;
    let threshold = null[rank];
    let band = tie_band(threshold);
    let above0 = null.iter().filter(|&&l| l > threshold + band).count();
    let ties0 = null.iter().filter(|&&l| (l - threshold).abs() <= band).count();
    let gamma = if ties0 == 0 {
        0.0
    } else {
        ((mc.pf_target * n as f64 - above0 as f64) / ties0 as f64).clamp(0.0, 1.0)
    };

    let alt = model.log_lr_samples(Hypothesis::H1, n, mc.seed, purpose::DETECTION);
    let hits: Vec<f64> = alt
        .iter()
        .map(|&l| {
            if l > threshold + band {
                1.0
            } else if (l - threshold).abs() <= band {
                gamma
            } else {
                0.0
            }
        })
        .collect();
    let value = pairwise_sum(&hits) / n as f64;
    McEstimate {
        value,
        stderr: (value * (1.0 - value) / n as f64).sqrt(),
        n_runs: n,
        seed: mc.seed,
    }
}

/// Simulated J-divergence of the received signal:
/// `E[log-LR | H1] - E[log-LR | H0]` with pooled standard error.
pub fn estimate_j_mc(scenario: &Scenario, allocation: &Allocation, mc: &McConfig) -> Result<McEstimate, McError> {
    let model = SignalModel::new(scenario, allocation)?;
    let n = mc.n_runs;
    let s1 = model.log_lr_samples(Hypothesis::H1, n, mc.seed, purpose::J_H1);
    let s0 = model.log_lr_samples(Hypothesis::H0, n, mc.seed, purpose::J_H0);
    let (m1, v1) = mean_and_var(&s1);
    let (m0, v0) = mean_and_var(&s0);
    Ok(McEstimate {
        value: m1 - m0,
        stderr: (v1 / n as f64 + v0 / n as f64).sqrt(),
        n_runs: n,
        seed: mc.seed,
    })
}

/// Sample mean and covariance of simulated `y`, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_stderr: DVector<f64>,
    pub cov_stderr: DMatrix<f64>,
    pub n: usize,
}

pub fn empirical_moments(
    scenario: &Scenario,
    allocation: &Allocation,
    hypothesis: Hypothesis,
    n: usize,
    seed: u64,
) -> Result<EmpiricalMoments, McError> {
    let model = SignalModel::new(scenario, allocation)?;
    let tag = match hypothesis {
        Hypothesis::H0 => purpose::MOMENTS_H0,
        Hypothesis::H1 => purpose::MOMENTS_H1,
    };
    let ys: Vec<DVector<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, tag, i);
            let u = model.draw_decisions(hypothesis, &mut rng);
            model.draw_received(&u, &mut rng)
        })
        .collect();
    let dim = scenario.channel().n();
    let nf = n as f64;
    let mean = DVector::from_iterator(
        dim,
        (0..dim).map(|a| pairwise_sum(&ys.iter().map(|y| y[a]).collect::<Vec<_>>()) / nf),
    );
    let mut cov = DMatrix::zeros(dim, dim);
    let mut cov_stderr = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let prods: Vec<f64> = ys.iter().map(|y| (y[a] - mean[a]) * (y[b] - mean[b])).collect();
            let (m, v) = mean_and_var(&prods);
            cov[(a, b)] = m;
            cov[(b, a)] = m;
            let se = (v / nf).sqrt();
            cov_stderr[(a, b)] = se;
            cov_stderr[(b, a)] = se;
        }
    }
    let mean_stderr = DVector::from_iterator(dim, (0..dim).map(|a| (cov[(a, a)] / nf).sqrt()));
    Ok(EmpiricalMoments {
        mean,
        cov,
        mean_stderr,
        cov_stderr,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleObjective {
    /// The allocation objective (decoupled form on orthogonal channels).
    ApproxJ,
    /// Simulated fusion-center detection probability.
    PdFc(McConfig),
}

pub const DEFAULT_GRID_STEP_APPROX_J: f64 = 0.02;
pub const DEFAULT_GRID_STEP_PD_FC: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub p1: f64,
    pub p2: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle {
    pub best: Allocation,
    pub best_value: f64,
    pub surface: Vec<GridPoint>,
}

fn grid_axis(cap: f64, step: f64) -> Vec<f64> {
    let n = (cap / step + 1e-9).floor() as usize;
    (0..=n).map(|i| (i as f64 * step).min(cap)).collect()
}

/// Exhaustive search over the feasible two-sensor power grid. Every PdFc
/// point reuses the same seed.
pub fn grid_oracle(scenario: &Scenario, objective: OracleObjective, grid_step: f64) -> Result<GridOracle, McError> {
    if scenario.k() != 2 {
        return Err(McError::GridNeedsTwoSensors { k: scenario.k() });
    }
    if !(grid_step > 0.0) {
        return Err(McError::InvalidConfig(format!("grid step {grid_step} must be positive")));
    }
    let caps = scenario.caps();
    let budget = scenario.p_tot() * (1.0 + 1e-12);
    let mut points = Vec::new();
    for &p1 in &grid_axis(caps[0], grid_step) {
        for &p2 in &grid_axis(caps[1], grid_step) {
            if p1 + p2 <= budget {
                points.push((p1, p2));
            }
        }
    }
    let mut surface = Vec::with_capacity(points.len());
    for (p1, p2) in points {
        let alloc = Allocation::new(vec![p1, p2]);
        let value = match objective {
            OracleObjective::ApproxJ => divergence::approx_objective(scenario, &alloc)?,
            OracleObjective::PdFc(mc) => estimate_pd_fc(scenario, &alloc, &mc)?.value,
        };
        surface.push(GridPoint { p1, p2, value });
    }
    let best = surface
        .iter()
        .fold(None::<GridPoint>, |acc, pt| match acc {
            Some(b) if b.value >= pt.value => Some(b),
            _ => Some(*pt),
        })
        .expect("grid contains the origin");
    Ok(GridOracle {
        best: Allocation::new(vec![best.p1, best.p2]),
        best_value: best.value,
        surface,
    })
}
