//! Power allocation: baselines, weighted waterfilling for orthogonal
//! channels whose sensors all sit in the concavity region, a log-barrier
//! interior-point solver for everything else, and a KKT checker.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::divergence::{self, d2j_dp2, dj_dp, marginal_at_zero, DivergenceError, OrthCoeffs};
use crate::scenario::{Allocation, Scenario, SensorProfile};

/// Relative budget tolerance of the waterfilling line search (`eps / P_tot`).
pub const WATERFILL_EPS: f64 = 1e-6;

/// Relative tolerance of the per-sensor power inversion (`tol / P_max`).
pub const INVERSION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("this allocator needs an orthogonal channel")]
    NotOrthogonal,
    #[error("sensor {sensor} is outside the concavity region; use the general solver")]
    OutsideRegionS { sensor: usize },
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

/// Fills `total` proportionally to `weights`, clamping at `caps` and handing
/// the excess of clamped entries to the rest until nothing changes.
pub fn capped_proportional_fill(weights: &[f64], caps: &[f64], total: f64) -> Vec<f64> {
    let k = weights.len();
    if caps.iter().sum::<f64>() <= total {
        return caps.to_vec();
    }
    let mut out = vec![0.0; k];
    let mut free: Vec<usize> = (0..k).collect();
    let mut remaining = total;
    loop {
        let wsum: f64 = free.iter().map(|&j| weights[j]).sum();
        if free.is_empty() || wsum <= 0.0 {
            break;
        }
        let scale = remaining / wsum;
        let capped: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&j| weights[j] * scale >= caps[j])
            .collect();
        if capped.is_empty() {
            for &j in &free {
                out[j] = weights[j] * scale;
            }
            break;
        }
        for &j in &capped {
            out[j] = caps[j];
            remaining -= caps[j];
        }
        free.retain(|j| !capped.contains(j));
    }
    out
}

/// `P_j = P_tot / K`, capped, with leftovers shared equally among the rest.
pub fn equal_allocation(scenario: &Scenario) -> Allocation {
    let k = scenario.k();
    Allocation::new(capped_proportional_fill(&vec![1.0; k], &scenario.caps(), scenario.p_tot()))
}

/// `P_j` proportional to `1 / g_j`, so every sensor arrives with the same SNR.
pub fn equal_snr_allocation(scenario: &Scenario) -> Result<Allocation, AllocError> {
    let (gains, _) = scenario.channel().orthogonal_parts().ok_or(AllocError::NotOrthogonal)?;
    let weights: Vec<f64> = gains.iter().map(|g| 1.0 / g).collect();
    Ok(Allocation::new(capped_proportional_fill(&weights, &scenario.caps(), scenario.p_tot())))
}

/// Power that sensor `j` takes at multiplier `lambda`: 0 above its marginal
/// value at zero, `P_max` below its marginal value at full power, otherwise
/// the root of `dJ/dP = lambda` by bisection.
pub fn kkt_power_at_lambda(lambda: f64, sensor: &SensorProfile, g: f64, sigma2: f64) -> Result<f64, AllocError> {
    if !divergence::in_region_s(sensor.p_d, sensor.p_f).inside {
        return Err(AllocError::OutsideRegionS { sensor: 0 });
    }
    Ok(invert_marginal(lambda, &sensor.into(), sensor.p_max, g, sigma2))
}

fn invert_marginal(lambda: f64, c: &OrthCoeffs, p_max: f64, g: f64, sigma2: f64) -> f64 {
    if lambda >= dj_dp(c, 0.0, g, sigma2) {
        return 0.0;
    }
    if lambda <= dj_dp(c, p_max, g, sigma2) {
        return p_max;
    }
    let (mut lo, mut hi) = (0.0, p_max);
    let tol = INVERSION_TOL * p_max;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if dj_dp(c, mid, g, sigma2) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillState {
    /// Marginal value at zero power per sensor.
    pub w0: Vec<f64>,
    /// Marginal value at full power per sensor.
    pub w1: Vec<f64>,
    /// Sensor indices by descending `w0`, ties by index.
    pub order: Vec<usize>,
    pub lambda: f64,
    /// Final `(w_a, w_b)` bracket, `w_a >= w_b`.
    pub bracket: (f64, f64),
    pub iterations: usize,
}

/// Weighted waterfilling. Requires an orthogonal channel with every sensor
/// inside the concavity region.
pub fn waterfill_allocate(scenario: &Scenario) -> Result<(Allocation, WaterfillState), AllocError> {
    let (gains, sigma2) = scenario.channel().orthogonal_parts().ok_or(AllocError::NotOrthogonal)?;
    let sensors = scenario.sensors();
    if let Some(j) = sensors
        .iter()
        .position(|s| !divergence::in_region_s(s.p_d, s.p_f).inside)
    {
        return Err(AllocError::OutsideRegionS { sensor: j });
    }
    let coeffs: Vec<OrthCoeffs> = sensors.iter().map(OrthCoeffs::from).collect();
    let w0: Vec<f64> = sensors
        .iter()
        .zip(gains)
        .map(|(s, &g)| marginal_at_zero(s.p_d, s.p_f, g, sigma2))
        .collect();
    let w1: Vec<f64> = sensors
        .iter()
        .zip(gains)
        .zip(&coeffs)
        .map(|((s, &g), c)| dj_dp(c, s.p_max, g, sigma2))
        .collect();
    let mut order: Vec<usize> = (0..sensors.len()).collect();
    order.sort_by(|&a, &b| w0[b].total_cmp(&w0[a]).then(a.cmp(&b)));

    let powers_at = |lambda: f64| -> Vec<f64> {
        sensors
            .iter()
            .zip(gains)
            .zip(&coeffs)
            .map(|((s, &g), c)| invert_marginal(lambda, c, s.p_max, g, sigma2))
            .collect()
    };
    let total_at = |lambda: f64| -> f64 { powers_at(lambda).iter().sum() };

    let p_tot = scenario.p_tot();
    if scenario.cap_sum() <= p_tot {
        let state = WaterfillState {
            w0,
            w1,
            order,
            lambda: 0.0,
            bracket: (0.0, 0.0),
            iterations: 0,
        };
        return Ok((Allocation::new(scenario.caps()), state));
    }

    // largest rank j' whose threshold still fits the budget
    let k = order.len();
    let mut jp = 0;
    for (rank, &j) in order.iter().enumerate() {
        if total_at(w0[j]) <= p_tot {
            jp = rank;
        }
    }
    let mut wa = w0[order[jp]];
    let mut wb = if jp + 1 == k { 0.0 } else { w0[order[jp + 1]] };
    let eps = WATERFILL_EPS * p_tot;
    let mut iterations = 0;
    while total_at(wb) - total_at(wa) >= eps && iterations < 200 {
        let wc = 0.5 * (wa + wb);
        if total_at(wc) <= p_tot {
            wa = wc;
        } else {
            wb = wc;
        }
        iterations += 1;
    }
    let state = WaterfillState {
        w0,
        w1,
        order,
        lambda: wa,
        bracket: (wa, wb),
        iterations,
    };
    Ok((Allocation::new(finalize(scenario, powers_at(wa))?), state))
}

/// Lagrange multipliers reconstructed from an allocation's active set.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Multiplier of the budget constraint.
    pub lambda: f64,
    /// Multipliers of `P_j >= 0`.
    pub nu: Vec<f64>,
    /// Multipliers of `P_j <= P_max(j)`.
    pub eta: Vec<f64>,
    /// `grad_j - lambda + nu_j - eta_j`, relative to the largest gradient entry.
    pub stationarity_residual: Vec<f64>,
    /// Complementary slackness violation, relative to `max|grad| * P_tot`.
    pub complementarity_residual: f64,
    pub budget_active: bool,
    /// Either the budget is exhausted or every sensor is at its cap.
    pub on_boundary: bool,
}

impl KktReport {
    pub fn max_stationarity(&self) -> f64 {
        self.stationarity_residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn accepted(&self, tol: f64) -> bool {
        self.max_stationarity() <= tol && self.complementarity_residual <= tol && self.on_boundary
    }
}

/// Relative width of the active-set band used when reading multipliers off an allocation.
const ACTIVE_TOL: f64 = 1e-5;

/// Builds a [`KktReport`] from the objective gradient at `p`.
pub fn kkt_from_gradient(grad: &[f64], p: &[f64], caps: &[f64], p_tot: f64) -> KktReport {
    let k = p.len();
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(f64::MIN_POSITIVE);
    let atol = ACTIVE_TOL * p_tot;
    let total: f64 = p.iter().sum();
    let budget_active = total >= p_tot - atol;
    let at_zero: Vec<bool> = p.iter().map(|&x| x <= atol).collect();
    let at_cap: Vec<bool> = p.iter().zip(caps).map(|(&x, &c)| x >= c - atol && x > atol).collect();
    let free: Vec<usize> = (0..k).filter(|&j| !at_zero[j] && !at_cap[j]).collect();

    let lambda = if !budget_active {
        0.0
    } else if !free.is_empty() {
        (free.iter().map(|&j| grad[j]).sum::<f64>() / free.len() as f64).max(0.0)
    } else {
        let lo = (0..k).filter(|&j| at_zero[j]).map(|j| grad[j]).fold(0.0f64, f64::max);
        let hi = (0..k).filter(|&j| at_cap[j]).map(|j| grad[j]).fold(f64::INFINITY, f64::min);
        if hi.is_infinite() {
            lo
        } else {
            0.5 * (lo + hi)
        }
    };
    let nu: Vec<f64> = (0..k)
        .map(|j| if at_zero[j] { (lambda - grad[j]).max(0.0) } else { 0.0 })
        .collect();
    let eta: Vec<f64> = (0..k)
        .map(|j| if at_cap[j] { (grad[j] - lambda).max(0.0) } else { 0.0 })
        .collect();
    let stationarity_residual = (0..k).map(|j| (grad[j] - lambda + nu[j] - eta[j]) / scale).collect();
    let comp: f64 = (0..k)
        .map(|j| nu[j] * p[j].abs() + eta[j] * (caps[j] - p[j]).abs())
        .sum::<f64>()
        + lambda * (p_tot - total).abs();
    let all_capped = at_cap.iter().all(|&c| c);
    KktReport {
        lambda,
        nu,
        eta,
        stationarity_residual,
        complementarity_residual: comp / (scale * p_tot),
        budget_active,
        on_boundary: budget_active || all_capped,
    }
}

/// Gradient of the allocation objective: analytic on orthogonal channels,
/// central differences of the moment-matched J otherwise.
pub fn objective_gradient(scenario: &Scenario, p: &[f64]) -> Result<Vec<f64>, AllocError> {
    match scenario.channel().orthogonal_parts() {
        Some((gains, sigma2)) => Ok(scenario
            .sensors()
            .iter()
            .zip(gains)
            .zip(p)
            .map(|((s, &g), &pj)| dj_dp(&s.into(), pj, g, sigma2))
            .collect()),
        None => fd_gradient(scenario, p),
    }
}

fn mimo_at(scenario: &Scenario, p: &[f64]) -> Result<f64, AllocError> {
    Ok(divergence::j_approx(scenario, &Allocation::new(p.to_vec()))?)
}

fn fd_gradient(scenario: &Scenario, p: &[f64]) -> Result<Vec<f64>, AllocError> {
    let k = p.len();
    let base = scenario.p_tot() / k as f64;
    let mut x = p.to_vec();
    let mut grad = vec![0.0; k];
    for j in 0..k {
        let nominal = 1e-6 * p[j].max(base);
        let pj = p[j];
        if pj > 0.0 {
            let h = nominal.min(0.5 * pj);
            x[j] = pj + h;
            let up = mimo_at(scenario, &x)?;
            x[j] = pj - h;
            let down = mimo_at(scenario, &x)?;
            grad[j] = (up - down) / (2.0 * h);
        } else {
            let h = nominal;
            x[j] = h;
            let up = mimo_at(scenario, &x)?;
            x[j] = 2.0 * h;
            let up2 = mimo_at(scenario, &x)?;
            x[j] = 0.0;
            let at = mimo_at(scenario, &x)?;
            grad[j] = (-3.0 * at + 4.0 * up - up2) / (2.0 * h);
        }
        x[j] = pj;
    }
    Ok(grad)
}

/// KKT residuals of an allocation on an orthogonal channel.
pub fn verify_kkt(scenario: &Scenario, allocation: &Allocation) -> Result<KktReport, AllocError> {
    if !scenario.is_orthogonal() {
        return Err(AllocError::NotOrthogonal);
    }
    let grad = objective_gradient(scenario, &allocation.p)?;
    Ok(kkt_from_gradient(&grad, &allocation.p, &scenario.caps(), scenario.p_tot()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralOptions {
    pub mu_initial: f64,
    pub mu_final: f64,
    pub mu_factor: f64,
    /// Newton iterations allowed per barrier stage.
    pub max_inner_iters: usize,
    /// Relative stationarity tolerance for certification.
    pub kkt_tol: f64,
    pub parallel_starts: bool,
}

impl Default for GeneralOptions {
    fn default() -> Self {
        GeneralOptions {
            mu_initial: 1.0,
            mu_final: 1e-9,
            mu_factor: 10.0,
            max_inner_iters: 200,
            kkt_tol: 1e-4,
            parallel_starts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralSolution {
    pub allocation: Allocation,
    pub kkt: KktReport,
    /// Value of the allocation objective (see [`divergence::approx_objective`]).
    pub objective: f64,
    /// Every barrier stage converged and the KKT residuals are within tolerance.
    pub certified: bool,
    /// Index of the winning start in the multi-start list.
    pub start_index: usize,
}

/// Starting points: equal, equal-SNR (orthogonal only), then each sensor at
/// full power alone.
pub fn start_points(scenario: &Scenario) -> Vec<Vec<f64>> {
    let k = scenario.k();
    let p_tot = scenario.p_tot();
    let mut starts = vec![equal_allocation(scenario).p];
    if let Ok(a) = equal_snr_allocation(scenario) {
        starts.push(a.p);
    }
    for j in 0..k {
        let mut v = vec![0.0; k];
        v[j] = scenario.sensors()[j].p_max.min(p_tot);
        starts.push(v);
    }
    starts
}

/// Maximises the allocation objective over `0 <= P_j <= P_max(j)`,
/// `sum P_j <= P_tot` with a log-barrier interior-point method from several
/// starts, returning the best.
pub fn general_allocate(scenario: &Scenario, options: &GeneralOptions) -> Result<GeneralSolution, AllocError> {
    let caps = scenario.caps();
    let p_tot = scenario.p_tot();
    if scenario.cap_sum() <= p_tot {
        let allocation = Allocation::new(caps.clone());
        let grad = objective_gradient(scenario, &allocation.p)?;
        let kkt = kkt_from_gradient(&grad, &allocation.p, &caps, p_tot);
        let objective = divergence::approx_objective(scenario, &allocation)?;
        return Ok(GeneralSolution {
            allocation,
            kkt,
            objective,
            certified: true,
            start_index: 0,
        });
    }
    let starts = start_points(scenario);
    let run = |(i, s): (usize, &Vec<f64>)| barrier_solve(scenario, s, options).map(|r| (i, r));
    let results: Vec<(usize, BarrierResult)> = if options.parallel_starts {
        starts.par_iter().enumerate().map(run).collect::<Result<_, _>>()?
    } else {
        starts.iter().enumerate().map(run).collect::<Result<_, _>>()?
    };
    // results are in start order, so a strict comparison keeps the lowest index on ties
    let mut best: Option<(usize, BarrierResult, f64)> = None;
    for (i, r) in results {
        let value = divergence::approx_objective(scenario, &Allocation::new(r.p.clone()))?;
        if best.as_ref().is_none_or(|(_, _, b)| value > *b) {
            best = Some((i, r, value));
        }
    }
    let (start_index, result, objective) = best.expect("at least one start");
    let grad = objective_gradient(scenario, &result.p)?;
    let kkt = kkt_from_gradient(&grad, &result.p, &caps, p_tot);
    let certified = result.converged && kkt.max_stationarity() <= options.kkt_tol;
    Ok(GeneralSolution {
        allocation: Allocation::new(result.p),
        kkt,
        objective,
        certified,
        start_index,
    })
}

/// Which solver produced an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Waterfill,
    General,
}

impl Method {
    /// Waterfilling when the channel is orthogonal and every sensor is in
    /// the concavity region, the general solver otherwise.
    pub fn auto(scenario: &Scenario) -> Method {
        if scenario.is_orthogonal() && scenario.flags().all_in_region_s() {
            Method::Waterfill
        } else {
            Method::General
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Waterfill => "waterfill",
            Method::General => "general",
        }
    }
}

/// KKT tolerance for certifying a waterfilling result.
pub const WATERFILL_KKT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposed {
    pub allocation: Allocation,
    pub method: Method,
    pub kkt: KktReport,
    pub certified: bool,
}

/// The proposed allocation with the given solver, or [`Method::auto`]'s choice.
pub fn proposed_allocation(scenario: &Scenario, method: Option<Method>) -> Result<Proposed, AllocError> {
    let method = method.unwrap_or_else(|| Method::auto(scenario));
    match method {
        Method::Waterfill => {
            let (allocation, _) = waterfill_allocate(scenario)?;
            let kkt = verify_kkt(scenario, &allocation)?;
            let certified = kkt.accepted(WATERFILL_KKT_TOL);
            Ok(Proposed {
                allocation,
                method,
                kkt,
                certified,
            })
        }
        Method::General => {
            let sol = general_allocate(scenario, &GeneralOptions::default())?;
            Ok(Proposed {
                allocation: sol.allocation,
                method,
                kkt: sol.kkt,
                certified: sol.certified,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BarrierResult {
    p: Vec<f64>,
    converged: bool,
}

/// Objective in scaled variables `x = P / P_tot`, normalised so its gradient
/// at the start point has unit max-norm.
struct ScaledObjective<'a> {
    scenario: &'a Scenario,
    p_tot: f64,
    norm: f64,
}

impl ScaledObjective<'_> {
    fn powers(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.p_tot).collect()
    }

    fn value(&self, x: &[f64]) -> Result<f64, AllocError> {
        let a = Allocation::new(self.powers(x));
        Ok(divergence::approx_objective(self.scenario, &a)? / self.norm)
    }

    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, AllocError> {
        let g = objective_gradient(self.scenario, &self.powers(x))?;
        Ok(DVector::from_iterator(g.len(), g.iter().map(|v| v * self.p_tot / self.norm)))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, AllocError> {
        let k = x.len();
        match self.scenario.channel().orthogonal_parts() {
            Some((gains, sigma2)) => {
                let diag = self.scenario.sensors().iter().zip(gains).zip(x).map(|((s, &g), &xj)| {
                    d2j_dp2(&s.into(), xj * self.p_tot, g, sigma2).value * self.p_tot * self.p_tot / self.norm
                });
                Ok(DMatrix::from_diagonal(&DVector::from_iterator(k, diag)))
            }
            None => {
                let mut hess = DMatrix::zeros(k, k);
                let mut xp = x.to_vec();
                for j in 0..k {
                    let h = (1e-4 * x[j].max(1.0 / k as f64)).min(0.5 * x[j]);
                    xp[j] = x[j] + h;
                    let up = self.gradient(&xp)?;
                    xp[j] = x[j] - h;
                    let down = self.gradient(&xp)?;
                    xp[j] = x[j];
                    hess.set_column(j, &((up - down) / (2.0 * h)));
                }
                let sym = (&hess + hess.transpose()) * 0.5;
                Ok(sym)
            }
        }
    }
}

fn barrier_solve(scenario: &Scenario, start: &[f64], options: &GeneralOptions) -> Result<BarrierResult, AllocError> {
    let k = scenario.k();
    let p_tot = scenario.p_tot();
    let caps: Vec<f64> = scenario.caps().iter().map(|c| c / p_tot).collect();
    // strictly interior start: blend with a point well inside every bound
    let center: Vec<f64> = caps.iter().map(|&c| 0.5 * c.min(1.0 / k as f64)).collect();
    let mut x: Vec<f64> = start
        .iter()
        .zip(&center)
        .map(|(s, c)| 0.9 * s / p_tot + 0.1 * c)
        .collect();

    let probe = ScaledObjective {
        scenario,
        p_tot,
        norm: 1.0,
    };
    let norm = probe.gradient(&x)?.amax().max(1e-300);
    let obj = ScaledObjective { scenario, p_tot, norm };

    let barrier = |x: &[f64], mu: f64| -> Result<f64, AllocError> {
        let slack: f64 = 1.0 - x.iter().sum::<f64>();
        let mut logs = slack.ln();
        for (xj, cj) in x.iter().zip(&caps) {
            logs += xj.ln() + (cj - xj).ln();
        }
        Ok(-obj.value(x)? - mu * logs)
    };

    let mut converged = true;
    let mut mu = options.mu_initial;
    loop {
        let mut stage_done = false;
        for _ in 0..options.max_inner_iters {
            let slack = 1.0 - x.iter().sum::<f64>();
            let grad_f = obj.gradient(&x)?;
            let hess_f = obj.hessian(&x)?;
            let mut grad = -grad_f;
            let mut hess = -hess_f;
            for j in 0..k {
                let up = caps[j] - x[j];
                grad[j] += -mu / x[j] + mu / up + mu / slack;
                hess[(j, j)] += mu / (x[j] * x[j]) + mu / (up * up);
            }
            hess.add_scalar_mut(mu / (slack * slack));

            let dir = newton_direction(&hess, &grad);
            let slope = grad.dot(&dir);
            if -slope < 1e-14 {
                stage_done = true;
                break;
            }
            // largest step keeping every constraint strictly satisfied
            let mut step_max = 1.0f64;
            for j in 0..k {
                if dir[j] < 0.0 {
                    step_max = step_max.min(-0.99 * x[j] / dir[j]);
                } else if dir[j] > 0.0 {
                    step_max = step_max.min(0.99 * (caps[j] - x[j]) / dir[j]);
                }
            }
            let dsum = dir.sum();
            if dsum > 0.0 {
                step_max = step_max.min(0.99 * slack / dsum);
            }
            let current = barrier(&x, mu)?;
            let mut step = step_max;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(xi, di)| xi + step * di).collect();
                let value = barrier(&trial, mu)?;
                if value.is_finite() && value <= current + 1e-4 * step * slope {
                    x = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // no decrease available at machine precision
                stage_done = true;
                break;
            }
        }
        if !stage_done {
            converged = false;
        }
        if mu <= options.mu_final {
            break;
        }
        mu = (mu / options.mu_factor).max(options.mu_final);
    }

    let mut p: Vec<f64> = x.iter().map(|v| v * p_tot).collect();
    // snap to the active set the barrier is converging to
    let snap = 1e-7 * p_tot;
    for (pj, s) in p.iter_mut().zip(scenario.sensors()) {
        if *pj < snap {
            *pj = 0.0;
        } else if s.p_max - *pj < snap {
            *pj = s.p_max;
        }
    }
    let p = finalize(scenario, p)?;
    Ok(BarrierResult { p, converged })
}

/// Removes any overshoot the snapping introduced and spends budget the
/// barrier left unused (its slack shrinks only like `mu / lambda`). The
/// fill is kept only if it does not lower the objective.
fn finalize(scenario: &Scenario, mut p: Vec<f64>) -> Result<Vec<f64>, AllocError> {
    let caps = scenario.caps();
    let p_tot = scenario.p_tot();
    let interior = |x: f64, c: f64| x > 0.0 && x < c;

    let total: f64 = p.iter().sum();
    if total > p_tot {
        let excess = total - p_tot;
        let free: f64 = p.iter().zip(&caps).filter(|(x, c)| interior(**x, **c)).map(|(x, _)| x).sum();
        if free > excess {
            let keep = 1.0 - excess / free;
            for (x, c) in p.iter_mut().zip(&caps) {
                if interior(*x, *c) {
                    *x *= keep;
                }
            }
        } else {
            let keep = p_tot / total;
            p.iter_mut().for_each(|x| *x *= keep);
        }
    }

    let deficit = p_tot.min(scenario.cap_sum()) - p.iter().sum::<f64>();
    if deficit > 1e-12 * p_tot {
        let headroom: Vec<f64> = p.iter().zip(&caps).map(|(x, c)| (c - x).max(0.0)).collect();
        let mut weights: Vec<f64> = p.iter().zip(&caps).map(|(x, c)| if interior(*x, *c) { *x } else { 0.0 }).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = headroom.clone();
        }
        let extra = capped_proportional_fill(&weights, &headroom, deficit);
        let filled: Vec<f64> = p.iter().zip(&extra).zip(&caps).map(|((x, e), c)| (x + e).min(*c)).collect();
        let before = divergence::approx_objective(scenario, &Allocation::new(p.clone()))?;
        let after = divergence::approx_objective(scenario, &Allocation::new(filled.clone()))?;
        if after >= before {
            p = filled;
        }
    }
    Ok(p)
}

/// Solves `hess d = -grad`, shifting the Hessian until it is positive
/// definite; falls back to steepest descent.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let k = grad.len();
    let diag_max = (0..k).map(|j| hess[(j, j)].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut shift = 0.0;
    for _ in 0..40 {
        let mut h = hess.clone();
        if shift > 0.0 {
            for j in 0..k {
                h[(j, j)] += shift;
            }
        }
        if let Some(ch) = h.cholesky() {
            let d = ch.solve(&(-grad));
            if d.iter().all(|v| v.is_finite()) && grad.dot(&d) < 0.0 {
                return d;
            }
        }
        shift = if shift == 0.0 { 1e-10 * diag_max } else { shift * 10.0 };
    }
    -grad
}
