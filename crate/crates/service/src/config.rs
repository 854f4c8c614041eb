//! Service and shared config file.
//!
//! One TOML file serves both the service and the CLI:
//!
//! ```toml
//! [service]
//! data_dir = "data"
//! bind = "127.0.0.1:8080"
//! apparatus = "simulator"        # or "bridge:HOST:PORT"
//!
//! [session]                      # template for `simulate` and `run`
//! task = "VT2PD"
//! tsid = "P01"
//!
//! [observer]                     # simulated participant for `simulate`
//! kind = "IDEAL"
//! truth = { a = 22.5, b = 3.0, gamma = 0.5, delta = 0.02 }
//! ```
//!
//! `VIBROPSI_DATA_DIR`, `VIBROPSI_BIND` and `VIBROPSI_APPARATUS` override the
//! `[service]` keys.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use vibropsi_core::apparatus::FaultProfile;
use vibropsi_core::observer::ObserverModel;
use vibropsi_core::protocol::SessionConfig;

pub const ENV_DATA_DIR: &str = "VIBROPSI_DATA_DIR";
pub const ENV_BIND: &str = "VIBROPSI_BIND";
pub const ENV_APPARATUS: &str = "VIBROPSI_APPARATUS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Which rig backs new sessions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Simulator,
    /// Line-protocol bridge reachable over TCP.
    Bridge(String),
}

impl FromStr for Backend {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("simulator") {
            return Ok(Backend::Simulator);
        }
        match s.strip_prefix("bridge:") {
            Some(addr) if !addr.is_empty() => Ok(Backend::Bridge(addr.to_string())),
            _ => Err(ConfigError::Invalid(format!(
                "apparatus must be \"simulator\" or \"bridge:HOST:PORT\", got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Simulator => f.write_str("simulator"),
            Backend::Bridge(addr) => write!(f, "bridge:{addr}"),
        }
    }
}

impl Serialize for Backend {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Backend {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub apparatus: Backend,
    /// Shared operator token. When set, every request except `/health` must
    /// carry `Authorization: Bearer <token>`.
    #[serde(default)]
    pub token: Option<String>,
    /// Simulated rigs sleep through motion and bursts like the real device.
    #[serde(default)]
    pub simulator_real_time: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            bind: default_bind(),
            apparatus: Backend::default(),
            token: None,
            simulator_real_time: false,
        }
    }
}

impl ServiceConfig {
    /// Applies the documented environment overrides from `lookup`.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = lookup(ENV_APPARATUS) {
            self.apparatus = v.parse()?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }
}

/// The whole config file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub service: ServiceConfig,
    pub session: Option<SessionConfig>,
    pub observer: Option<ObserverModel>,
    #[serde(default)]
    pub fault: FaultProfile,
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Toml { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }
}
