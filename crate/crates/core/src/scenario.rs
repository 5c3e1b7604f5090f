//! Problem instances: sensor qualities, the channel between sensors and the
//! fusion center, and the joint power budget.
//!
//! All powers are linear mW and all gains are linear inside the library;
//! dB and dBm only appear in the helpers below and in the config loader.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::divergence;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario has no sensors")]
    NoSensors,
    #[error("sensor {sensor}: {field} = {value} is not a probability in [0, 1]")]
    ProbabilityOutOfRange {
        sensor: usize,
        field: &'static str,
        value: f64,
    },
    #[error("sensor {sensor}: p_d = {p_d} must exceed p_f = {p_f} (uninformative or inverted sensor)")]
    UninformativeSensor { sensor: usize, p_d: f64, p_f: f64 },
    #[error("sensor {sensor}: power cap p_max = {value} mW must be positive")]
    NonPositiveCap { sensor: usize, value: f64 },
    #[error("total power budget p_tot = {0} mW must be positive")]
    NonPositiveBudget(f64),
    #[error("distance {0} m must be positive")]
    NonPositiveDistance(f64),
    #[error("channel gain {0} must be positive and finite")]
    NonPositiveGain(f64),
    #[error("noise variance {0} mW must be positive")]
    NonPositiveNoise(f64),
    #[error("interference coefficient rho = {0} must lie in [0, 1)")]
    InvalidInterference(f64),
    #[error("channel matrix has {columns} columns but the scenario has {sensors} sensors")]
    ColumnMismatch { columns: usize, sensors: usize },
    #[error("noise covariance is {rows}x{cols} but the channel has {n} rows")]
    CovarianceShape { rows: usize, cols: usize, n: usize },
    #[error("noise covariance is not symmetric")]
    CovarianceNotSymmetric,
    #[error("noise covariance is not positive definite")]
    CovarianceNotPositiveDefinite,
    #[error("channel matrix contains a non-finite entry")]
    NonFiniteChannel,
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Local decision quality and transmit cap of one sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorProfile {
    pub p_d: f64,
    pub p_f: f64,
    /// mW
    pub p_max: f64,
}

impl SensorProfile {
    pub fn new(p_d: f64, p_f: f64, p_max: f64) -> Result<Self, ScenarioError> {
        let s = SensorProfile { p_d, p_f, p_max };
        s.check(0)?;
        Ok(s)
    }

    fn check(&self, sensor: usize) -> Result<(), ScenarioError> {
        for (field, value) in [("p_d", self.p_d), ("p_f", self.p_f)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScenarioError::ProbabilityOutOfRange {
                    sensor,
                    field,
                    value,
                });
            }
        }
        if self.p_d <= self.p_f {
            return Err(ScenarioError::UninformativeSensor {
                sensor,
                p_d: self.p_d,
                p_f: self.p_f,
            });
        }
        if !(self.p_max > 0.0) || !self.p_max.is_finite() {
            return Err(ScenarioError::NonPositiveCap {
                sensor,
                value: self.p_max,
            });
        }
        Ok(())
    }
}

/// Pathloss in dB together with the corresponding linear power gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoss {
    pub pl_db: f64,
    pub gain: f64,
}

/// Motley-Keenan pathloss without wall and floor terms:
/// `PL = pl0 + 10 n log10(d / d0)`, gain `10^(-PL/10)`.
pub fn pathloss_gain(d: f64, pl0_db: f64, exponent: f64, d0: f64) -> Result<PathLoss, ScenarioError> {
    if !(d > 0.0) {
        return Err(ScenarioError::NonPositiveDistance(d));
    }
    if !(d0 > 0.0) {
        return Err(ScenarioError::NonPositiveDistance(d0));
    }
    let pl_db = pl0_db + 10.0 * exponent * (d / d0).log10();
    Ok(PathLoss {
        pl_db,
        gain: db_to_linear(-pl_db),
    })
}

/// How the per-sensor gains enter the cross-coupled channel matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainConvention {
    /// `H = C diag(g)`: power gains in the amplitude position, as the
    /// two-sensor interference example is usually written.
    #[default]
    Amplitude,
    /// `H = C diag(sqrt(g))`: gains treated as power gains.
    Power,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelKind {
    /// `H = diag(sqrt(g))`, `R = sigma2 I`.
    Orthogonal { gains: Vec<f64>, sigma2: f64 },
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    kind: ChannelKind,
}

impl ChannelSpec {
    pub fn orthogonal(gains: &[f64], sigma2: f64) -> Result<Self, ScenarioError> {
        if let Some(&g) = gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(ScenarioError::NonPositiveGain(g));
        }
        if !(sigma2 > 0.0) {
            return Err(ScenarioError::NonPositiveNoise(sigma2));
        }
        let k = gains.len();
        let h = DMatrix::from_diagonal(&DVector::from_iterator(k, gains.iter().map(|g| g.sqrt())));
        let r = DMatrix::identity(k, k) * sigma2;
        Ok(ChannelSpec {
            h,
            r,
            kind: ChannelKind::Orthogonal {
                gains: gains.to_vec(),
                sigma2,
            },
        })
    }

    /// Arbitrary `N x K` channel with `N x N` noise covariance. `N` need not
    /// equal `K`.
    pub fn general(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, ScenarioError> {
        if h.iter().any(|x| !x.is_finite()) {
            return Err(ScenarioError::NonFiniteChannel);
        }
        let n = h.nrows();
        if r.nrows() != n || r.ncols() != n {
            return Err(ScenarioError::CovarianceShape {
                rows: r.nrows(),
                cols: r.ncols(),
                n,
            });
        }
        let scale = r.amax().max(f64::MIN_POSITIVE);
        if (&r - r.transpose()).amax() > 1e-12 * scale {
            return Err(ScenarioError::CovarianceNotSymmetric);
        }
        if r.clone().cholesky().is_none() {
            return Err(ScenarioError::CovarianceNotPositiveDefinite);
        }
        Ok(ChannelSpec {
            h,
            r,
            kind: ChannelKind::General,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn kind(&self) -> &ChannelKind {
        &self.kind
    }

    /// Received-signal dimension `N`.
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// Number of transmitting sensors `K`.
    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    /// `(gains, sigma2)` when the channel is orthogonal.
    pub fn orthogonal_parts(&self) -> Option<(&[f64], f64)> {
        match &self.kind {
            ChannelKind::Orthogonal { gains, sigma2 } => Some((gains, *sigma2)),
            ChannelKind::General => None,
        }
    }
}

/// Two-sensor interference channel `H = [[1, rho], [rho, 1]] diag(.)` with
/// `R = sigma2 I`.
pub fn build_cross_channel(
    gains: [f64; 2],
    rho: f64,
    sigma2: f64,
    convention: GainConvention,
) -> Result<ChannelSpec, ScenarioError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(ScenarioError::InvalidInterference(rho));
    }
    if let Some(&g) = gains.iter().find(|g| !(**g > 0.0)) {
        return Err(ScenarioError::NonPositiveGain(g));
    }
    if !(sigma2 > 0.0) {
        return Err(ScenarioError::NonPositiveNoise(sigma2));
    }
    let col = |g: f64| match convention {
        GainConvention::Amplitude => g,
        GainConvention::Power => g.sqrt(),
    };
    let coupling = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    let h = coupling * DMatrix::from_diagonal(&DVector::from_vec(vec![col(gains[0]), col(gains[1])]));
    ChannelSpec::general(h, DMatrix::identity(2, 2) * sigma2)
}

/// A validated problem instance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    sensors: Vec<SensorProfile>,
    channel: ChannelSpec,
    p_tot: f64,
}

/// Per-scenario observations computed during validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFlags {
    /// Whether each sensor's `(p_d, p_f)` lies in the concavity region.
    pub in_region_s: Vec<bool>,
    /// The budget covers every cap, so all sensors simply transmit at full power.
    pub trivial_full_power: bool,
}

impl ScenarioFlags {
    pub fn all_in_region_s(&self) -> bool {
        self.in_region_s.iter().all(|&b| b)
    }
}

impl Scenario {
    pub fn new(sensors: Vec<SensorProfile>, channel: ChannelSpec, p_tot: f64) -> Result<Self, ScenarioError> {
        validate(sensors, channel, p_tot).map(|(s, _)| s)
    }

    pub fn sensors(&self) -> &[SensorProfile] {
        &self.sensors
    }

    pub fn channel(&self) -> &ChannelSpec {
        &self.channel
    }

    pub fn p_tot(&self) -> f64 {
        self.p_tot
    }

    pub fn k(&self) -> usize {
        self.sensors.len()
    }

    pub fn caps(&self) -> Vec<f64> {
        self.sensors.iter().map(|s| s.p_max).collect()
    }

    pub fn cap_sum(&self) -> f64 {
        self.sensors.iter().map(|s| s.p_max).sum()
    }

    pub fn is_orthogonal(&self) -> bool {
        matches!(self.channel.kind, ChannelKind::Orthogonal { .. })
    }

    /// Same sensors and channel under a different budget.
    pub fn with_p_tot(&self, p_tot: f64) -> Result<Self, ScenarioError> {
        if !(p_tot > 0.0) || !p_tot.is_finite() {
            return Err(ScenarioError::NonPositiveBudget(p_tot));
        }
        Ok(Scenario {
            p_tot,
            ..self.clone()
        })
    }

    pub fn flags(&self) -> ScenarioFlags {
        ScenarioFlags {
            in_region_s: self
                .sensors
                .iter()
                .map(|s| divergence::in_region_s(s.p_d, s.p_f).inside)
                .collect(),
            trivial_full_power: self.cap_sum() <= self.p_tot,
        }
    }
}

/// Enforces every scenario invariant and reports per-sensor flags.
pub fn validate(
    sensors: Vec<SensorProfile>,
    channel: ChannelSpec,
    p_tot: f64,
) -> Result<(Scenario, ScenarioFlags), ScenarioError> {
    if sensors.is_empty() {
        return Err(ScenarioError::NoSensors);
    }
    for (i, s) in sensors.iter().enumerate() {
        s.check(i)?;
    }
    if channel.k() != sensors.len() {
        return Err(ScenarioError::ColumnMismatch {
            columns: channel.k(),
            sensors: sensors.len(),
        });
    }
    if !(p_tot > 0.0) || !p_tot.is_finite() {
        return Err(ScenarioError::NonPositiveBudget(p_tot));
    }
    let scenario = Scenario {
        sensors,
        channel,
        p_tot,
    };
    let flags = scenario.flags();
    Ok((scenario, flags))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("allocation has {got} entries, scenario has {expected} sensors")]
    Length { got: usize, expected: usize },
    #[error("sensor {sensor}: power {value} mW outside [0, {cap}]")]
    OutOfBounds { sensor: usize, value: f64, cap: f64 },
    #[error("allocated total {total} mW exceeds budget {p_tot} mW")]
    OverBudget { total: f64, p_tot: f64 },
}

/// Per-sensor transmit powers in mW (`P_j = a_j^2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub p: Vec<f64>,
}

impl Allocation {
    pub fn new(p: Vec<f64>) -> Self {
        Allocation { p }
    }

    pub fn zeros(k: usize) -> Self {
        Allocation { p: vec![0.0; k] }
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Amplitude matrix diagonal `a_j = sqrt(P_j)`.
    pub fn amplitudes(&self) -> DVector<f64> {
        DVector::from_iterator(self.p.len(), self.p.iter().map(|p| p.max(0.0).sqrt()))
    }

    /// Checks bounds and budget; `rel_tol` is relative to the budget.
    pub fn check(&self, scenario: &Scenario, rel_tol: f64) -> Result<(), AllocationError> {
        if self.p.len() != scenario.k() {
            return Err(AllocationError::Length {
                got: self.p.len(),
                expected: scenario.k(),
            });
        }
        let slack = rel_tol * scenario.p_tot();
        for (j, (&p, s)) in self.p.iter().zip(scenario.sensors()).enumerate() {
            if !(p >= -slack && p <= s.p_max * (1.0 + rel_tol)) {
                return Err(AllocationError::OutOfBounds {
                    sensor: j,
                    value: p,
                    cap: s.p_max,
                });
            }
        }
        let total = self.total();
        if total > scenario.p_tot() + slack {
            return Err(AllocationError::OverBudget {
                total,
                p_tot: scenario.p_tot(),
            });
        }
        Ok(())
    }

    pub fn percentages(&self, p_tot: f64) -> Vec<f64> {
        self.p.iter().map(|p| 100.0 * p / p_tot).collect()
    }
}
