//! TOML scenario files.
//!
//! ```toml
//! [scenario]
//! channel = "orthogonal"      # orthogonal | cross | general
//! p_tot_dbm = 0.0
//! sigma2_dbm = -70.0
//! pl0_db = 55.0               # pathloss: defaults shown
//! pathloss_exp = 2.0
//! d0_m = 1.0
//!
//! [[sensor]]
//! d_m = 2.0                   # or gain_db = -61.0
//! p_d = 0.9
//! p_f = 0.04
//! p_max_dbm = 3.0
//! ```
//!
//! `cross` channels also take `rho` and `gain_convention`
//! (`amplitude`, the default, or `power`); `general` channels take `h`
//! (N×K, rows) and `r_mw` (N×N). `k` and `n` are optional consistency
//! checks, `prior_h0`/`prior_h1` default to ½. Unknown keys are rejected.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;

use crate::scenario::{
    build_cross_channel, db_to_linear, dbm_to_mw, pathloss_gain, validate, ChannelSpec, GainConvention, Scenario,
    ScenarioError, ScenarioFlags, SensorProfile,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("invalid scenario: {0}")]
    Scenario(#[from] ScenarioError),
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelChoice {
    Orthogonal,
    Cross,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
enum ConventionChoice {
    #[serde(rename = "amplitude", alias = "amplitude-as-printed")]
    Amplitude,
    #[serde(rename = "power")]
    Power,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    scenario: RawGlobal,
    #[serde(default)]
    sensor: Vec<RawSensor>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGlobal {
    channel: ChannelChoice,
    p_tot_dbm: f64,
    sigma2_dbm: Option<f64>,
    #[serde(default = "default_pl0")]
    pl0_db: f64,
    #[serde(default = "default_exp")]
    pathloss_exp: f64,
    #[serde(default = "default_d0")]
    d0_m: f64,
    rho: Option<f64>,
    gain_convention: Option<ConventionChoice>,
    k: Option<usize>,
    n: Option<usize>,
    h: Option<Vec<Vec<f64>>>,
    r_mw: Option<Vec<Vec<f64>>>,
    prior_h0: Option<f64>,
    prior_h1: Option<f64>,
}

fn default_pl0() -> f64 {
    55.0
}
fn default_exp() -> f64 {
    2.0
}
fn default_d0() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    d_m: Option<f64>,
    gain_db: Option<f64>,
    p_d: f64,
    p_f: f64,
    p_max_dbm: f64,
}

/// A parsed and validated scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub flags: ScenarioFlags,
    pub channel: ChannelChoice,
    pub gain_convention: GainConvention,
    /// Linear power gain per sensor; empty for `general` channels.
    pub gains: Vec<f64>,
    pub prior_h0: f64,
    pub prior_h1: f64,
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim_end().to_string()))?;
        build(raw)
    }

    /// Same file at a different budget.
    pub fn with_p_tot(&self, p_tot_mw: f64) -> Result<Self, ConfigError> {
        let scenario = self.scenario.with_p_tot(p_tot_mw)?;
        let flags = scenario.flags();
        Ok(ScenarioConfig {
            scenario,
            flags,
            ..self.clone()
        })
    }
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ConfigError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(field_err(field, "matrix is empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(field_err(
            format!("{field}[{i}]"),
            format!("row has {} entries, expected {ncols}", rows[i].len()),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn sensor_gain(raw: &RawSensor, i: usize, g: &RawGlobal) -> Result<f64, ConfigError> {
    match (raw.d_m, raw.gain_db) {
        (Some(d), None) => pathloss_gain(d, g.pl0_db, g.pathloss_exp, g.d0_m)
            .map(|pl| pl.gain)
            .map_err(|e| field_err(format!("sensor[{i}].d_m"), e.to_string())),
        (None, Some(db)) => Ok(db_to_linear(db)),
        (Some(_), Some(_)) => Err(field_err(format!("sensor[{i}]"), "give either d_m or gain_db, not both")),
        (None, None) => Err(field_err(format!("sensor[{i}]"), "missing d_m or gain_db")),
    }
}

fn build(raw: RawFile) -> Result<ScenarioConfig, ConfigError> {
    let g = &raw.scenario;
    if raw.sensor.is_empty() {
        return Err(ScenarioError::NoSensors.into());
    }
    let k = raw.sensor.len();
    if let Some(want) = g.k {
        if want != k {
            return Err(field_err("scenario.k", format!("k = {want} but {k} [[sensor]] sections")));
        }
    }
    let sensors = raw
        .sensor
        .iter()
        .map(|s| SensorProfile {
            p_d: s.p_d,
            p_f: s.p_f,
            p_max: dbm_to_mw(s.p_max_dbm),
        })
        .collect::<Vec<_>>();

    let sigma2 = || {
        g.sigma2_dbm
            .map(dbm_to_mw)
            .ok_or_else(|| field_err("scenario.sigma2_dbm", "required for this channel"))
    };
    let reject = |present: bool, field: &str| {
        if present {
            Err(field_err(field, format!("not used by `{:?}` channels", g.channel).to_lowercase()))
        } else {
            Ok(())
        }
    };
    let convention = match g.gain_convention {
        Some(ConventionChoice::Power) => GainConvention::Power,
        _ => GainConvention::Amplitude,
    };

    let (channel, gains) = match g.channel {
        ChannelChoice::Orthogonal => {
            reject(g.rho.is_some(), "scenario.rho")?;
            reject(g.h.is_some(), "scenario.h")?;
            reject(g.r_mw.is_some(), "scenario.r_mw")?;
            let gains = raw
                .sensor
                .iter()
                .enumerate()
                .map(|(i, s)| sensor_gain(s, i, g))
                .collect::<Result<Vec<_>, _>>()?;
            (ChannelSpec::orthogonal(&gains, sigma2()?)?, gains)
        }
        ChannelChoice::Cross => {
            reject(g.h.is_some(), "scenario.h")?;
            reject(g.r_mw.is_some(), "scenario.r_mw")?;
            if k != 2 {
                return Err(field_err("scenario.channel", format!("cross channel needs 2 sensors, got {k}")));
            }
            let gains = raw
                .sensor
                .iter()
                .enumerate()
                .map(|(i, s)| sensor_gain(s, i, g))
                .collect::<Result<Vec<_>, _>>()?;
            let rho = g.rho.unwrap_or(0.0);
            (build_cross_channel([gains[0], gains[1]], rho, sigma2()?, convention)?, gains)
        }
        ChannelChoice::General => {
            reject(g.rho.is_some(), "scenario.rho")?;
            reject(g.sigma2_dbm.is_some(), "scenario.sigma2_dbm")?;
            if let Some(i) = raw.sensor.iter().position(|s| s.d_m.is_some() || s.gain_db.is_some()) {
                return Err(field_err(format!("sensor[{i}]"), "general channels take gains from `h`"));
            }
            let h = matrix(g.h.as_deref().ok_or_else(|| field_err("scenario.h", "required"))?, "scenario.h")?;
            let r = matrix(g.r_mw.as_deref().ok_or_else(|| field_err("scenario.r_mw", "required"))?, "scenario.r_mw")?;
            (ChannelSpec::general(h, r)?, Vec::new())
        }
    };
    if let Some(want) = g.n {
        if want != channel.n() {
            return Err(field_err("scenario.n", format!("n = {want} but channel has {} outputs", channel.n())));
        }
    }

    let prior_h0 = g.prior_h0.unwrap_or_else(|| g.prior_h1.map_or(0.5, |p| 1.0 - p));
    let prior_h1 = g.prior_h1.unwrap_or(1.0 - prior_h0);
    if !(0.0..=1.0).contains(&prior_h0) || !(0.0..=1.0).contains(&prior_h1) || (prior_h0 + prior_h1 - 1.0).abs() > 1e-9
    {
        return Err(field_err("scenario.prior_h0", "priors must lie in [0, 1] and sum to 1"));
    }

    let (scenario, flags) = validate(sensors, channel, dbm_to_mw(g.p_tot_dbm))?;
    Ok(ScenarioConfig {
        scenario,
        flags,
        channel: g.channel,
        gain_convention: convention,
        gains,
        prior_h0,
        prior_h1,
    })
}
