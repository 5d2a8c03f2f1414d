use std::path::{Path, PathBuf};

use flowlens_core::attribution::ExplainConfig;
use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "FLOWLENS_PORT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}: {cause}")]
    Parse { path: PathBuf, cause: toml::de::Error },
    #[error("{PORT_ENV}={value:?} is not a port number")]
    BadPort { value: String },
}

/// `[service]` table of the shared configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Attribution jobs executed concurrently.
    pub workers: usize,
    /// Prediction steps served by glyph and region-grid endpoints.
    pub steps: usize,
    pub snapshot: Option<PathBuf>,
    pub dataset: Option<String>,
    /// Estimator settings for glyph attributions.
    pub glyph_explain: ExplainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            workers: 2,
            steps: 6,
            snapshot: None,
            dataset: None,
            glyph_explain: ExplainConfig::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct FileShape {
    #[serde(default)]
    service: ServiceConfig,
}

impl ServiceConfig {
    /// Reads the `[service]` table, ignoring the other tables of the file.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        Ok(toml::from_str::<FileShape>(text)?.service)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|cause| ConfigError::Io {
            path: path.to_path_buf(),
            cause,
        })?;
        Self::from_toml(&text).map_err(|cause| ConfigError::Parse {
            path: path.to_path_buf(),
            cause,
        })
    }

    pub fn with_env(self) -> Result<Self, ConfigError> {
        self.with_port_override(std::env::var(PORT_ENV).ok().as_deref())
    }

    pub fn with_port_override(mut self, value: Option<&str>) -> Result<Self, ConfigError> {
        if let Some(v) = value {
            self.port = v.trim().parse().map_err(|_| ConfigError::BadPort { value: v.into() })?;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_tables() {
        assert_eq!(ServiceConfig::from_toml("").unwrap(), ServiceConfig::default());
        let c = ServiceConfig::from_toml(
            "[grid]\nrows = 4\n[service]\nport = 9000\nworkers = 3\n[service.glyph_explain]\nnsamples = 512\n",
        )
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.workers, 3);
        assert_eq!(c.steps, 6);
        assert_eq!(c.glyph_explain.nsamples, 512);
        assert_eq!(c.glyph_explain.seed, 7);
        assert!(ServiceConfig::from_toml("[service]\nbogus = 1\n").is_err());
    }

    #[test]
    fn port_override() {
        let c = ServiceConfig::default().with_port_override(Some("4321")).unwrap();
        assert_eq!(c.port, 4321);
        assert_eq!(ServiceConfig::default().with_port_override(None).unwrap().port, 8080);
        assert!(ServiceConfig::default().with_port_override(Some("http")).is_err());
    }
}
