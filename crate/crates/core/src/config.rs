//! Application configuration.
//!
//! Sources, lowest precedence first: built-in defaults, an optional TOML
//! file, then environment variables. Environment keys take the prefix
//! `HYBRID_ROUTER_` and use `__` between path segments, so
//! `HYBRID_ROUTER_SERVER__PORT=9000` sets `server.port` and
//! `HYBRID_ROUTER_ADMIN_TOKEN=s3cret` sets `admin_token`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use config::{Config, Environment, File, FileFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_manager::ContextConfig;
use crate::embedding::EmbeddingProviderConfig;
use crate::feedback::FeedbackConfig;
use crate::harness::CorpusSpec;
use crate::intent_store::DEFAULT_CACHE_CAPACITY;
use crate::responder::RoutingMode;
use crate::retrieval::DEFAULT_TOP_K;

pub const ENV_PREFIX: &str = "HYBRID_ROUTER";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Load(#[from] config::ConfigError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Reference,
    External,
}

/// An optional remote component: answer generator or blender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Reference,
            endpoint: None,
            timeout_ms: 5_000,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    fn validate(&self, name: &str) -> Result<(), ConfigError> {
        if self.kind == BackendKind::External && self.endpoint.is_none() {
            return Err(ConfigError::Invalid(format!("{name}.endpoint is required for kind = \"external\"")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub cache_capacity: usize,
    /// JSON array of intent definitions used to seed an empty data dir.
    /// The bundled demo intents when unset.
    pub seed_intents: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            seed_intents: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Knowledge base in JSONL (`{doc_id, title, body}` per line). The
    /// bundled demo knowledge base when unset.
    pub kb_path: Option<PathBuf>,
    pub generator: BackendConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            kb_path: None,
            generator: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub idle_timeout_secs: u64,
    /// First-turn FAQ answers kept for repeat queries.
    pub response_cache_capacity: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            idle_timeout_secs: 30 * 60,
            response_cache_capacity: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub workers: usize,
    pub corpus: CorpusSpec,
    pub levels: Vec<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            corpus: CorpusSpec::default(),
            levels: vec![1_000, 5_000, 10_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub server: ServerConfig,
    /// Bearer token for `/v1/admin/*` and `/v1/metrics`. Admin routes
    /// reject every request when unset.
    pub admin_token: Option<String>,
    /// Where `intents.jsonl`, `unhandled.jsonl` and `intent_drafts.jsonl`
    /// live. Nothing is written when unset.
    pub data_dir: Option<PathBuf>,
    pub mode: RoutingMode,
    pub embedding: EmbeddingProviderConfig,
    pub context: ContextConfig,
    pub store: StoreConfig,
    pub retrieval: RetrievalConfig,
    pub blender: BackendConfig,
    pub feedback: FeedbackConfig,
    pub session: SessionConfig,
    pub harness: HarnessConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            server: ServerConfig::default(),
            admin_token: None,
            data_dir: None,
            mode: RoutingMode::Hybrid,
            embedding: EmbeddingProviderConfig::default(),
            context: ContextConfig::default(),
            store: StoreConfig::default(),
            retrieval: RetrievalConfig::default(),
            blender: BackendConfig::default(),
            feedback: FeedbackConfig::default(),
            session: SessionConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

impl AppConfig {
    /// Defaults, then `file`, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(file, None)
    }

    /// As [`AppConfig::load`], reading environment variables from `env`
    /// instead of the process when given.
    pub fn load_with_env(file: Option<&Path>, env: Option<HashMap<String, String>>) -> Result<Self, ConfigError> {
        let defaults = Config::try_from(&AppConfig::default())?;
        let mut builder = Config::builder().add_source(defaults);
        if let Some(path) = file {
            builder = builder.add_source(File::from(path).format(FileFormat::Toml).required(true));
        }
        builder = builder.add_source(
            Environment::with_prefix(ENV_PREFIX)
                .prefix_separator("_")
                .separator("__")
                .try_parsing(true)
                .source(env),
        );
        let cfg: AppConfig = builder.build()?.try_deserialize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let defaults = Config::try_from(&AppConfig::default())?;
        let cfg: AppConfig = Config::builder()
            .add_source(defaults)
            .add_source(File::from_str(text, FileFormat::Toml))
            .build()?
            .try_deserialize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedding.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.context.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.feedback.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.harness.corpus.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.retrieval.generator.validate("retrieval.generator")?;
        self.blender.validate("blender")?;
        if self.retrieval.top_k == 0 {
            return Err(ConfigError::Invalid("retrieval.top_k must be positive".into()));
        }
        if self.store.cache_capacity == 0 || self.session.response_cache_capacity == 0 {
            return Err(ConfigError::Invalid("cache capacities must be positive".into()));
        }
        if self.harness.workers == 0 {
            return Err(ConfigError::Invalid("harness.workers must be positive".into()));
        }
        Ok(())
    }

    pub fn bind_addr(&self) -> String {
        format!("{}:{}", self.server.host, self.server.port)
    }
}
