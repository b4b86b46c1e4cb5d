//! File configuration shared by the service and the command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::DiagnosisConfig;
use crate::evolution::EvolutionConfig;
use crate::gateway::ProviderConfig;
use crate::history::HistoryConfig;
use crate::linker::{EmbeddingProvider, HttpEmbedder, LinkerConfig, MockEmbedder};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub epsilon_s: f64,
    pub epsilon_t: f64,
    pub staleness_days: i64,
    pub max_ddx_questions: usize,
    pub max_questions_per_turn: usize,
    pub k: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        let h = HistoryConfig::default();
        let e = EvolutionConfig::default();
        Self {
            epsilon_s: LinkerConfig::DEFAULT_EPSILON_S,
            epsilon_t: e.epsilon_t,
            staleness_days: e.staleness_days,
            max_ddx_questions: h.max_ddx_questions,
            max_questions_per_turn: h.max_questions_per_turn,
            k: crate::diagnosis::DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub seed: u64,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Mock,
            seed: 0x5eed,
            dimension: MockEmbedder::DEFAULT_DIMENSION,
            endpoint: None,
            timeout_secs: 30,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        match self.kind {
            EmbedderKind::Mock => {
                if self.dimension == 0 {
                    return Err(ConfigError::Invalid(
                        "embedder dimension must be positive".into(),
                    ));
                }
                Ok(Arc::new(MockEmbedder::with_dimension(
                    self.seed,
                    self.dimension,
                )))
            }
            EmbedderKind::Http => {
                let ep = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("http embedder needs endpoint".into()))?;
                let e =
                    HttpEmbedder::new(ep, self.dimension, Duration::from_secs(self.timeout_secs))
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Arc::new(e))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    /// Directory holding the graph store, sessions and the worklist.
    pub data_dir: Option<PathBuf>,
    /// Seed files imported when the store does not exist yet.
    pub seed_nodes: Option<PathBuf>,
    pub seed_edges: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub thresholds: Thresholds,
    pub provider: ProviderConfig,
    pub embedder: EmbedderConfig,
    pub storage: StorageConfig,
}

impl AppConfig {
    /// Reads TOML, or JSON when the extension is `.json`. Relative paths are
    /// resolved against the file's directory.
    pub fn load<T: for<'de> Deserialize<'de> + ResolvePaths>(
        path: &Path,
    ) -> Result<T, ConfigError> {
        let read_err = |message: String| ConfigError::Read {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut cfg: T = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))?
        };
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.history().validate().map_err(|e| inv(&e))?;
        self.linker().validate().map_err(|e| inv(&e))?;
        self.evolution().validate().map_err(|e| inv(&e))?;
        if self.thresholds.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn history(&self) -> HistoryConfig {
        HistoryConfig {
            max_ddx_questions: self.thresholds.max_ddx_questions,
            max_questions_per_turn: self.thresholds.max_questions_per_turn,
            ..Default::default()
        }
    }

    pub fn linker(&self) -> LinkerConfig {
        LinkerConfig {
            epsilon_s: self.thresholds.epsilon_s,
        }
    }

    pub fn diagnosis(&self) -> DiagnosisConfig {
        DiagnosisConfig {
            linker: self.linker(),
            top_k: self.thresholds.k,
            kg_top: self.thresholds.k,
        }
    }

    pub fn evolution(&self) -> EvolutionConfig {
        EvolutionConfig {
            epsilon_t: self.thresholds.epsilon_t,
            staleness_days: self.thresholds.staleness_days,
        }
    }
}

/// Rewrites relative paths in a loaded configuration.
pub trait ResolvePaths {
    fn resolve_paths(&mut self, base: &Path);
}

pub fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ResolvePaths for AppConfig {
    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.storage.data_dir);
        resolve(base, &mut self.storage.seed_nodes);
        resolve(base, &mut self.storage.seed_edges);
        resolve(base, &mut self.provider.script_path);
        resolve(base, &mut self.provider.prompts_dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "[thresholds]\nepsilon_s = 0.75\nk = 5\n[storage]\ndata_dir = \"data\"\n[provider]\nkind = \"scripted_mock\"\nscript_path = \"s.json\"\n",
        )
        .unwrap();
        let c: AppConfig = AppConfig::load(&p).unwrap();
        assert_eq!(c.thresholds.epsilon_s, 0.75);
        assert_eq!(c.thresholds.epsilon_t, 0.90);
        assert_eq!(c.diagnosis().top_k, 5);
        assert_eq!(c.storage.data_dir, Some(dir.path().join("data")));
        assert_eq!(c.provider.script_path, Some(dir.path().join("s.json")));
        c.validate().unwrap();
    }

    #[test]
    fn json_and_invalid_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"thresholds": {"max_questions_per_turn": 3}}"#).unwrap();
        let c: AppConfig = AppConfig::load(&p).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            AppConfig::load::<AppConfig>(&dir.path().join("missing.toml")),
            Err(ConfigError::Read { .. })
        ));
    }
}
