// SPDX-License-Identifier: Apache-2.0

//! The testbed configuration file: `intersection`, `middleware` and
//! `scenario` sections in one JSON document.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::harness::ScenarioConfig;
use crate::middleware::MiddlewareConfig;
use crate::model::{ConfigError, IntersectionSpec, RingBarrierConfig};

const STANDARD8: &str = include_str!("../configs/standard8.json");

#[derive(Debug, Clone)]
pub struct TestbedConfig {
    pub intersection: RingBarrierConfig,
    pub middleware: MiddlewareConfig,
    pub scenario: ScenarioConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    intersection: IntersectionSpec,
    #[serde(default)]
    middleware: MiddlewareConfig,
    #[serde(default)]
    scenario: ScenarioConfig,
}

impl TestbedConfig {
    /// The bundled 8-phase configuration.
    pub fn standard() -> Self {
        Self::from_json(STANDARD8).expect("bundled configuration is valid")
    }

    pub fn standard_json() -> &'static str {
        STANDARD8
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let file: File = serde_json::from_str(text)?;
        let cfg = TestbedConfig {
            intersection: RingBarrierConfig::from_spec(file.intersection)?,
            middleware: file.middleware,
            scenario: file.scenario,
        };
        cfg.middleware.validate()?;
        cfg.scenario.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_loads() {
        let c = TestbedConfig::standard();
        assert_eq!(c.intersection.sequence().len(), 4);
        assert_eq!(c.middleware.n_timeout, 5);
        assert_eq!(c.scenario.step_length, 0.25);
        assert_eq!(c.scenario.rng_seed, 42);
    }

    #[test]
    fn sections_are_optional_but_must_be_valid() {
        let mut v: serde_json::Value = serde_json::from_str(STANDARD8).unwrap();
        v.as_object_mut().unwrap().remove("scenario");
        let c = TestbedConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(c.scenario, ScenarioConfig::default());
        v["middleware"]["n_timeout"] = 0.into();
        assert!(TestbedConfig::from_json(&v.to_string()).is_err());
        assert!(TestbedConfig::from_json("{").is_err());
        assert!(matches!(
            TestbedConfig::load(Path::new("/nonexistent/x.json")),
            Err(ConfigError::Io { .. })
        ));
    }
}
