use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Emergency deceleration bound (m/s²). Accelerations never go below `-B_EMERGENCY`.
pub const B_EMERGENCY: f64 = 6.0;
/// Fraction of spawned vehicles that make exactly one left turn on their corridor.
pub const LEFT_TURN_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
#[error("invalid scenario config: `{field}` {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarFollowing {
    pub v_max: f64,
    pub a_max_accel: f64,
    pub b_comfort: f64,
    pub min_gap: f64,
    pub headway: f64,
}

impl Default for CarFollowing {
    fn default() -> Self {
        Self {
            v_max: 11.11,
            a_max_accel: 2.0,
            b_comfort: 2.0,
            min_gap: 2.5,
            headway: 1.5,
        }
    }
}

/// Demand surge: the arrival rate ramps linearly from 1x to `factor`x over
/// `ramp_s` seconds starting at `start_s`, then stays there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surge {
    pub factor: f64,
    pub start_s: f64,
    pub ramp_s: f64,
}

/// Piecewise-linear rate multiplier over `(time_s, multiplier)` knots,
/// held constant outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diurnal {
    pub points: Vec<(f64, f64)>,
}

impl Diurnal {
    /// A two-peak daily shape compressed into `horizon_s` seconds.
    pub fn two_peak(horizon_s: f64) -> Self {
        let shape = [
            (0.0, 0.25),
            (0.125, 0.3),
            (0.3, 1.0),
            (0.4, 0.6),
            (0.55, 0.55),
            (0.72, 1.0),
            (0.85, 0.5),
            (1.0, 0.25),
        ];
        Self {
            points: shape.iter().map(|&(f, m)| (f * horizon_s, m)).collect(),
        }
    }

    pub fn multiplier(&self, t: f64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => 1.0,
            1 => pts[0].1,
            _ => {
                if t <= pts[0].0 {
                    return pts[0].1;
                }
                for w in pts.windows(2) {
                    let (t0, m0) = w[0];
                    let (t1, m1) = w[1];
                    if t <= t1 {
                        if t1 <= t0 {
                            return m1;
                        }
                        return m0 + (m1 - m0) * (t - t0) / (t1 - t0);
                    }
                }
                pts[pts.len() - 1].1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub link_length: f64,
    pub lanes_per_movement: usize,
    pub dt: f64,
    pub green_s: f64,
    pub yellow_s: f64,
    pub allred_s: f64,
    pub arrival_rate_per_entry: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surge: Option<Surge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diurnal: Option<Diurnal>,
    pub horizon_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub car_following: CarFollowing,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_rows: 2,
            grid_cols: 2,
            link_length: 150.0,
            lanes_per_movement: 1,
            dt: 1.0,
            green_s: 30.0,
            yellow_s: 3.0,
            allred_s: 2.0,
            arrival_rate_per_entry: 0.1,
            surge: None,
            diurnal: None,
            horizon_s: 600.0,
            seed: 0,
            car_following: CarFollowing::default(),
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be finite and > 0, got {v}")))
    }
}

fn ticks_of(field: &'static str, duration: f64, dt: f64) -> Result<u32, ConfigError> {
    let n = (duration / dt).round();
    if (n * dt - duration).abs() > 1e-9 * duration.max(1.0) || n < 1.0 {
        return Err(ConfigError::new(
            field,
            format!("{duration} s is not a whole multiple of dt = {dt} s"),
        ));
    }
    Ok(n as u32)
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioParseError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ScenarioParseError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("SimConfig always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_rows < 1 {
            return Err(ConfigError::new("grid_rows", "must be >= 1"));
        }
        if self.grid_cols < 1 {
            return Err(ConfigError::new("grid_cols", "must be >= 1"));
        }
        if self.lanes_per_movement < 1 {
            return Err(ConfigError::new("lanes_per_movement", "must be >= 1"));
        }
        positive("link_length", self.link_length)?;
        positive("dt", self.dt)?;
        positive("green_s", self.green_s)?;
        positive("yellow_s", self.yellow_s)?;
        positive("allred_s", self.allred_s)?;
        positive("horizon_s", self.horizon_s)?;
        ticks_of("green_s", self.green_s, self.dt)?;
        ticks_of("yellow_s", self.yellow_s, self.dt)?;
        ticks_of("allred_s", self.allred_s, self.dt)?;
        if !(self.arrival_rate_per_entry.is_finite() && self.arrival_rate_per_entry >= 0.0) {
            return Err(ConfigError::new("arrival_rate_per_entry", "must be finite and >= 0"));
        }
        if let Some(s) = &self.surge {
            if !(s.factor.is_finite() && s.factor >= 0.0) {
                return Err(ConfigError::new("surge.factor", "must be finite and >= 0"));
            }
            if !(s.start_s.is_finite() && s.start_s >= 0.0) {
                return Err(ConfigError::new("surge.start_s", "must be finite and >= 0"));
            }
            positive("surge.ramp_s", s.ramp_s)?;
        }
        if let Some(d) = &self.diurnal {
            if d.points.is_empty() {
                return Err(ConfigError::new("diurnal.points", "must not be empty"));
            }
            if d.points.iter().any(|&(t, m)| !t.is_finite() || !m.is_finite() || m < 0.0) {
                return Err(ConfigError::new("diurnal.points", "needs finite times and multipliers >= 0"));
            }
            if d.points.windows(2).any(|w| w[1].0 < w[0].0) {
                return Err(ConfigError::new("diurnal.points", "times must be nondecreasing"));
            }
        }
        let cf = &self.car_following;
        positive("car_following.v_max", cf.v_max)?;
        positive("car_following.a_max_accel", cf.a_max_accel)?;
        positive("car_following.b_comfort", cf.b_comfort)?;
        positive("car_following.min_gap", cf.min_gap)?;
        positive("car_following.headway", cf.headway)?;
        Ok(())
    }

    pub fn green_ticks(&self) -> u32 {
        (self.green_s / self.dt).round() as u32
    }

    pub fn yellow_ticks(&self) -> u32 {
        (self.yellow_s / self.dt).round() as u32
    }

    pub fn allred_ticks(&self) -> u32 {
        (self.allred_s / self.dt).round() as u32
    }

    pub fn horizon_ticks(&self) -> u32 {
        (self.horizon_s / self.dt).round() as u32
    }

    /// Arrival rate per entry link (veh/s) at simulation time `t`.
    pub fn arrival_rate(&self, t: f64) -> f64 {
        let mut rate = self.arrival_rate_per_entry;
        if let Some(s) = &self.surge {
            if t >= s.start_s {
                let frac = ((t - s.start_s) / s.ramp_s).min(1.0);
                rate *= 1.0 + (s.factor - 1.0) * frac;
            }
        }
        if let Some(d) = &self.diurnal {
            rate *= d.multiplier(t);
        }
        rate
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioParseError {
    #[error("scenario file syntax: {0}")]
    Syntax(String),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}
