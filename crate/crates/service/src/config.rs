use std::path::{Path, PathBuf};

use cxr_core::cascade::Thresholds;
use cxr_core::Stage;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const ENV_PREFIX: &str = "CASCADE_";
pub const DEFAULT_MAX_UPLOAD: usize = 20 * 1024 * 1024;

/// One checkpoint known to the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub stage: Stage,
    pub version: String,
    /// Checkpoint directory, relative paths resolved against the config file.
    pub path: PathBuf,
    #[serde(default)]
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: String,
    pub port: u16,
    pub thresholds: Thresholds,
    pub max_upload_bytes: usize,
    pub registry: Vec<RegistryEntry>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("data"),
            bind: "127.0.0.1".into(),
            port: 8080,
            thresholds: Thresholds::default(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            registry: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative `data_dir` and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        if self.data_dir.is_relative() {
            self.data_dir = base.join(&self.data_dir);
        }
        for e in &mut self.registry {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
    }

    /// Applies `CASCADE_*` overrides from the process environment.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(std::env::vars())
    }

    /// Applies `CASCADE_*` overrides from `vars`; other keys are ignored.
    pub fn apply_overrides<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref();
            let bad = |what: &str| ServiceError::Config(format!("{ENV_PREFIX}{key}: invalid {what} `{v}`"));
            match key {
                "DATA_DIR" => self.data_dir = PathBuf::from(v),
                "BIND" => self.bind = v.to_string(),
                "PORT" => self.port = v.parse().map_err(|_| bad("port"))?,
                "STAGE2_THRESHOLD" => self.thresholds.stage2 = v.parse().map_err(|_| bad("threshold"))?,
                "STAGE3_THRESHOLD" => self.thresholds.stage3 = v.parse().map_err(|_| bad("threshold"))?,
                "MAX_UPLOAD_BYTES" => self.max_upload_bytes = v.parse().map_err(|_| bad("size"))?,
                _ => log::warn!("ignoring unknown setting {ENV_PREFIX}{key}"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        crate::registry::validate_entries(&self.registry)
    }
}
