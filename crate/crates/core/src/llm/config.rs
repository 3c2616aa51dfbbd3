//! Backend configuration files (TOML or JSON, chosen by extension).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LlmBackend, LlmError, MockBackend, RemoteBackend, TemplateName};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself never appears in config.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// JSONL fixture file, relative to the config file.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub default_response: Option<String>,
    /// Per-template canned responses.
    #[serde(default)]
    pub templates: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Remote(RemoteConfig),
    Mock(MockConfig),
}

impl BackendConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let invalid = |message: String| ConfigError::Invalid { path: path.to_path_buf(), message };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| invalid(e.to_string()))
        }
    }

    /// Instantiates the backend; `base` resolves relative fixture paths.
    pub fn build(&self, base: &Path) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        match self {
            BackendConfig::Remote(r) => Ok(Arc::new(RemoteBackend::new(r.clone())?)),
            BackendConfig::Mock(m) => {
                let mut backend = MockBackend::new();
                if let Some(f) = &m.fixtures {
                    let path = base.join(f);
                    let reader = BufReader::new(File::open(&path)?);
                    backend = backend
                        .load_fixtures(reader)
                        .map_err(|message| ConfigError::Invalid { path: path.clone(), message })?;
                }
                for (name, response) in &m.templates {
                    let t = TemplateName::parse(name).ok_or_else(|| ConfigError::Invalid {
                        path: base.to_path_buf(),
                        message: format!("unknown template '{name}'"),
                    })?;
                    backend = backend.with_template(t, response.clone());
                }
                if let Some(d) = &m.default_response {
                    backend = backend.with_default(d.clone());
                }
                Ok(Arc::new(backend))
            }
        }
    }
}

/// Reads a config file and builds its backend.
pub fn load_backend(path: &Path) -> Result<Arc<dyn LlmBackend>, ConfigError> {
    let cfg = BackendConfig::from_path(path)?;
    cfg.build(path.parent().unwrap_or_else(|| Path::new(".")))
}
