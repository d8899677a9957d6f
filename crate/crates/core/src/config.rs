//! Combined TOML configuration for the emulator, the controller and the
//! server. Every section is optional and falls back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::pneumodel::{PneumaticConfig, DEFAULT_DT, MAX_DT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirmwareSettings {
    /// Physics timestep, seconds.
    pub dt: f64,
    pub host: String,
    pub port: u16,
}

impl Default for FirmwareSettings {
    fn default() -> Self {
        FirmwareSettings {
            dt: DEFAULT_DT,
            host: "127.0.0.1".to_string(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pneumatic: PneumaticConfig,
    pub controller: ControllerConfig,
    pub firmware: FirmwareSettings,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pneumatic
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.controller
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let dt = self.firmware.dt;
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(ConfigError::Invalid(format!("firmware.dt {dt} outside (0, {MAX_DT}]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pneumodel::GateDirection;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_override() {
        let c = Config::from_toml("[pneumatic]\nmax_pressure = 20.0\n[firmware]\nport = 9000\n").unwrap();
        assert_eq!(c.pneumatic.max_pressure, 20.0);
        assert_eq!(c.pneumatic.pump_flow_rate, 2.5);
        assert_eq!(c.firmware.port, 9000);
        assert_eq!(c.firmware.dt, DEFAULT_DT);
    }

    #[test]
    fn round_trips() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn manifold_from_toml() {
        let text = r#"
[pneumatic.manifold]
inflate_pump_pin = 5
deflate_pump_pin = 6
servo_pins = [10, 11, 12]

[[pneumatic.manifold.valves]]
pin = 1
role = "gate"
inflatables = [1]
direction = "inflate"

[[pneumatic.manifold.valves]]
pin = 2
role = "gate"
inflatables = [2]
direction = "inflate"

[[pneumatic.manifold.valves]]
pin = 3
role = "gate"
inflatables = [3]
direction = "inflate"

[[pneumatic.manifold.valves]]
pin = 4
role = "gate"
inflatables = [1, 2, 3]
direction = "deflate"
"#;
        let c = Config::from_toml(text).unwrap();
        assert_eq!(c.pneumatic.manifold.selector_pin(), None);
        let deflate: Vec<u8> = c
            .pneumatic
            .manifold
            .gates(2, GateDirection::Deflate)
            .map(|p| p.value())
            .collect();
        assert_eq!(deflate, [4]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            Config::from_toml("[firmware]\ndt = 0.5\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_toml("[pneumatic]\npump_flow_rate = -1.0\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(Config::from_toml("bogus = 1\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = Config::load(Path::new("/definitely/not/here.toml")).unwrap_err();
        assert!(matches!(e, ConfigError::Io { .. }));
    }
}
