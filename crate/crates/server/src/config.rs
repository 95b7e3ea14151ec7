//! Server configuration: an optional TOML file, then environment overrides.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! data_dir = "/var/lib/pipescan"
//! token_lifetime_secs = 28800
//! static_dir = "webui/dist"
//! ```
//!
//! `PIPESCAN_LISTEN`, `PIPESCAN_DATA_DIR` and `PIPESCAN_TOKEN_LIFETIME_SECS`
//! take precedence over the file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{name}: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub token_lifetime_secs: u64,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("valid default address"),
            data_dir: PathBuf::from("data"),
            token_lifetime_secs: 8 * 3600,
            static_dir: None,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read `path` if given, then apply overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        if let Some(v) = env("PIPESCAN_LISTEN") {
            cfg.listen = v.parse().map_err(|e| invalid("PIPESCAN_LISTEN", e))?;
        }
        if let Some(v) = env("PIPESCAN_DATA_DIR") {
            cfg.data_dir = PathBuf::from(v);
        }
        if let Some(v) = env("PIPESCAN_TOKEN_LIFETIME_SECS") {
            cfg.token_lifetime_secs = v.parse().map_err(|e| invalid("PIPESCAN_TOKEN_LIFETIME_SECS", e))?;
        }
        if cfg.token_lifetime_secs == 0 {
            return Err(invalid("token_lifetime_secs", "must be positive"));
        }
        Ok(cfg)
    }

    pub fn api_config(&self) -> crate::services::ApiConfig {
        crate::services::ApiConfig {
            token_lifetime: chrono::Duration::seconds(self.token_lifetime_secs as i64),
            static_dir: self.static_dir.clone(),
        }
    }
}

fn invalid(name: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}
