//! Server configuration: a TOML file plus environment overrides.

use std::path::{Path, PathBuf};

use incseg::inference::{DEFAULT_OVERLAP, DEFAULT_WINDOW};
use incseg::model::HeadInit;
use incseg::trainer::{FinetuneConfig, SelectionMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PORT: &str = "INCSEG_PORT";
pub const ENV_CHECKPOINT_DIR: &str = "INCSEG_CHECKPOINT_DIR";
pub const ENV_WORKERS: &str = "INCSEG_WORKERS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {name}={value:?}: {reason}")]
    Env {
        name: &'static str,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Directory that `checkpoint` references in session requests resolve against.
    pub checkpoint_dir: PathBuf,
    /// Fine-tuning jobs run FIFO on this many workers.
    pub workers: usize,
    pub head_init: HeadInit,
    pub prediction_window: usize,
    pub prediction_overlap: f64,
    /// Defaults for fine-tuning jobs; request bodies override single fields.
    pub finetune: FinetuneConfig,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".to_owned(),
            port: 8080,
            checkpoint_dir: PathBuf::from("checkpoints"),
            workers: 1,
            head_init: HeadInit::Zero,
            prediction_window: DEFAULT_WINDOW,
            prediction_overlap: DEFAULT_OVERLAP,
            finetune: FinetuneConfig {
                selection_mode: SelectionMode::Deployment,
                ..FinetuneConfig::default()
            },
            max_body_bytes: 256 * 1024 * 1024,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (if given), then applies process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_PORT) {
            self.port = v
                .parse()
                .map_err(|e: std::num::ParseIntError| ConfigError::Env {
                    name: ENV_PORT,
                    value: v.clone(),
                    reason: e.to_string(),
                })?;
        }
        if let Some(v) = get(ENV_CHECKPOINT_DIR) {
            self.checkpoint_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_WORKERS) {
            self.workers = v
                .parse()
                .map_err(|e: std::num::ParseIntError| ConfigError::Env {
                    name: ENV_WORKERS,
                    value: v.clone(),
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.prediction_window == 0 || !(0.0..1.0).contains(&self.prediction_overlap) {
            return Err(ConfigError::Invalid(
                "prediction window must be positive and overlap in [0, 1)".into(),
            ));
        }
        if self.finetune.selection_mode == SelectionMode::Benchmark {
            return Err(ConfigError::Invalid(
                "benchmark selection needs ground truth, which the service does not have".into(),
            ));
        }
        self.finetune
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults_use_deployment_selection() {
        let cfg = ServiceConfig::default();
        assert_eq!(cfg.finetune.selection_mode, SelectionMode::Deployment);
        assert_eq!(cfg.workers, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(
            &path,
            "port = 9000\nworkers = 2\n[finetune]\nsteps = 4\nselection_window = 2\nselection_mode = \"deployment\"\n",
        )
        .unwrap();
        let mut cfg = ServiceConfig::from_file(&path).unwrap();
        assert_eq!((cfg.port, cfg.workers, cfg.finetune.steps), (9000, 2, 4));
        let env: HashMap<&str, &str> = [
            (ENV_PORT, "9100"),
            (ENV_CHECKPOINT_DIR, "/ckpt"),
            (ENV_WORKERS, "3"),
        ]
        .into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.checkpoint_dir, PathBuf::from("/ckpt"));
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = ServiceConfig::default();
        assert!(matches!(
            cfg.apply_env(|k| (k == ENV_PORT).then(|| "eighty".to_owned())),
            Err(ConfigError::Env { name: ENV_PORT, .. })
        ));
        cfg.workers = 0;
        assert!(cfg.validate().is_err());
        let bench = ServiceConfig {
            finetune: FinetuneConfig::default(),
            ..ServiceConfig::default()
        };
        assert!(bench.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "colour = 3\n").unwrap();
        assert!(matches!(
            ServiceConfig::from_file(&path),
            Err(ConfigError::Parse { .. })
        ));
    }
}
