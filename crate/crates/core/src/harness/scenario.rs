// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{ConfigError, PhaseId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[serde(alias = "real")]
    RealTime,
    #[default]
    Virtual,
}

impl FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "real" | "real_time" | "realtime" => Ok(ClockMode::RealTime),
            "virtual" => Ok(ClockMode::Virtual),
            other => Err(format!("unknown clock mode {other:?} (expected real or virtual)")),
        }
    }
}

impl fmt::Display for ClockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClockMode::RealTime => "real",
            ClockMode::Virtual => "virtual",
        })
    }
}

/// Traffic demand and run pacing. Times in seconds, rates in vehicles per
/// second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub step_length: f64,
    /// Agent period for the selection, switch and fixed agents.
    pub control_interval: f64,
    pub arrival_rate: BTreeMap<PhaseId, f64>,
    /// Discharge rate of a green phase's queue.
    pub saturation_rate: f64,
    pub rng_seed: u64,
    pub duration: f64,
    pub clock_mode: ClockMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            step_length: 0.25,
            control_interval: 10.0,
            arrival_rate: BTreeMap::new(),
            saturation_rate: 0.5,
            rng_seed: 0,
            duration: 1200.0,
            clock_mode: ClockMode::Virtual,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.step_length.is_finite() && self.step_length > 0.0) {
            return bad(format!(
                "scenario.step_length must be positive, got {}",
                self.step_length
            ));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return bad(format!("scenario.duration must be non-negative, got {}", self.duration));
        }
        if !(self.saturation_rate.is_finite() && self.saturation_rate >= 0.0) {
            return bad(format!(
                "scenario.saturation_rate must be non-negative, got {}",
                self.saturation_rate
            ));
        }
        if let Some((p, r)) = self.arrival_rate.iter().find(|(_, r)| !(r.is_finite() && **r >= 0.0)) {
            return bad(format!(
                "scenario.arrival_rate for phase {p} must be non-negative, got {r}"
            ));
        }
        let ratio = self.control_interval / self.step_length;
        if !(self.control_interval > 0.0 && ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return bad(format!(
                "scenario.control_interval ({}) must be a positive multiple of step_length ({})",
                self.control_interval, self.step_length
            ));
        }
        Ok(())
    }

    /// Step length, rounded to whole microseconds so step arithmetic is exact.
    pub fn step(&self) -> Duration {
        Duration::from_micros((self.step_length * 1e6).round() as u64)
    }

    pub fn steps_per_interval(&self) -> u64 {
        (self.control_interval / self.step_length).round() as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.duration / self.step_length).round() as u64
    }

    pub fn rate(&self, p: PhaseId) -> f64 {
        self.arrival_rate.get(&p).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_string_phase_keys() {
        let c: ScenarioConfig =
            serde_json::from_str(r#"{"arrival_rate": {"2": 0.2, "6": 0.25}, "clock_mode": "real_time"}"#).unwrap();
        assert_eq!(c.rate(PhaseId::new(2).unwrap()), 0.2);
        assert_eq!(c.rate(PhaseId::new(1).unwrap()), 0.0);
        assert_eq!(c.clock_mode, ClockMode::RealTime);
        c.validate().unwrap();
    }

    #[test]
    fn interval_must_be_step_multiple() {
        let mut c = ScenarioConfig::default();
        assert_eq!(c.steps_per_interval(), 40);
        assert_eq!(c.total_steps(), 4800);
        c.control_interval = 10.1;
        assert!(c.validate().is_err());
        c.control_interval = 0.1;
        assert!(c.validate().is_err());
    }
}
