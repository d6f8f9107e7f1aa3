// SPDX-License-Identifier: Apache-2.0

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::ConfigError;

/// Middleware timing and error-detection parameters. Times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiddlewareConfig {
    /// Signal-state polling frequency, Hz.
    pub poll_hz: f64,
    /// Per-request reply timeout.
    pub udp_timeout: f64,
    /// Longest a commanded transition may take before the manager times out.
    pub transition_timeout: f64,
    /// Consecutive failed polls that raise a communication failure.
    pub n_timeout: u32,
    /// Consecutive over-length simulation steps that raise a drift failure.
    pub n_drift: u32,
    /// Period of the transition check while on hold.
    pub verify_interval: f64,
    /// Accepted for compatibility with existing configurations; it has no
    /// effect.
    pub lock_window: f64,
}

impl Default for MiddlewareConfig {
    fn default() -> Self {
        MiddlewareConfig {
            poll_hz: 10.0,
            udp_timeout: 1.0,
            transition_timeout: 10.0,
            n_timeout: 5,
            n_drift: 5,
            verify_interval: 0.1,
            lock_window: 5.0,
        }
    }
}

impl MiddlewareConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("poll_hz", self.poll_hz),
            ("udp_timeout", self.udp_timeout),
            ("transition_timeout", self.transition_timeout),
            ("verify_interval", self.verify_interval),
            ("lock_window", self.lock_window),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "middleware.{name} must be positive, got {v}"
                )));
            }
        }
        if self.n_timeout == 0 || self.n_drift == 0 {
            return Err(ConfigError::Invalid(
                "middleware.n_timeout and n_drift must be at least 1".into(),
            ));
        }
        if self.verify_interval > self.transition_timeout {
            return Err(ConfigError::Invalid(format!(
                "middleware.verify_interval ({}) exceeds transition_timeout ({})",
                self.verify_interval, self.transition_timeout
            )));
        }
        Ok(())
    }

    pub fn poll_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.poll_hz)
    }

    pub fn udp_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.udp_timeout)
    }

    pub fn transition_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.transition_timeout)
    }

    pub fn verify_interval(&self) -> Duration {
        Duration::from_secs_f64(self.verify_interval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = MiddlewareConfig::default();
        c.validate().unwrap();
        assert_eq!(c.poll_period(), Duration::from_millis(100));
        assert_eq!(c.verify_interval(), Duration::from_millis(100));
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = MiddlewareConfig {
            verify_interval: 20.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.verify_interval = 0.1;
        c.n_timeout = 0;
        assert!(c.validate().is_err());
        c.n_timeout = 5;
        c.poll_hz = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_section_uses_defaults() {
        let c: MiddlewareConfig = serde_json::from_str(r#"{"poll_hz": 20}"#).unwrap();
        assert_eq!(c.poll_hz, 20.0);
        assert_eq!(c.n_timeout, 5);
        assert!(serde_json::from_str::<MiddlewareConfig>(r#"{"pol_hz": 20}"#).is_err());
    }
}
