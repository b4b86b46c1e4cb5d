use std::collections::BTreeMap;
use std::path::Path;

use casegraph_core::config::{AppConfig, ResolvePaths};
use serde::{Deserialize, Serialize};

use crate::auth::Role;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    #[serde(flatten)]
    pub app: AppConfig,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    pub canvas_width: f64,
    pub canvas_height: f64,
    /// Diagnoses below this severity are left out of the global layout.
    pub min_severity: Option<u8>,
    /// Bearer token → grant.
    pub tokens: BTreeMap<String, TokenGrant>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            canvas_width: 1000.0,
            canvas_height: 800.0,
            min_severity: None,
            tokens: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrant {
    pub role: Role,
    /// Patient id for patients, user name otherwise.
    pub actor: String,
}

impl ResolvePaths for ServiceConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.app.resolve_paths(base);
    }
}
