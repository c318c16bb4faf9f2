//! Pipeline configuration loaded from TOML. Every section has defaults, so an
//! empty file is a valid configuration. Credentials are read from the
//! environment variables named here, never from the file itself.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{FusionConfig, PredictorConfig, TrendConfig};
use crate::eval::EvalSettings;
use crate::eventlog::{ColumnMapping, LogFormat};
use crate::llm::{ChatBackend, RemoteBackend, RemoteChatConfig, StubBackend};
use crate::memory::{EmbeddingProvider, HashingEmbedder, RemoteEmbedder, RemoteEmbeddingConfig, Retention};
use crate::wipseries::{GapPolicy, LifecycleConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    /// Inferred from the file extension when absent.
    pub format: Option<LogFormat>,
    pub mapping: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesConfig {
    pub lifecycle: LifecycleConfig,
    pub gap_policy: GapPolicy,
    /// Calendar used to cut days.
    pub timezone: Tz,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            lifecycle: LifecycleConfig::default(),
            gap_policy: GapPolicy::Carry,
            timezone: chrono_tz::UTC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Deterministic(HashingEmbedder),
    Remote(RemoteEmbeddingConfig),
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Deterministic(HashingEmbedder::default())
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Arc<dyn EmbeddingProvider> {
        match self {
            EmbeddingConfig::Deterministic(h) => Arc::new(h.clone()),
            EmbeddingConfig::Remote(r) => Arc::new(RemoteEmbedder::new(r.clone())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ChatConfig {
    #[default]
    Stub,
    Remote(RemoteChatConfig),
}

impl ChatConfig {
    pub fn backend(&self) -> Box<dyn ChatBackend> {
        match self {
            ChatConfig::Stub => Box::new(StubBackend),
            ChatConfig::Remote(r) => Box::new(RemoteBackend::from_env(r.clone())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Last training day; the final 20% of days are held out when absent.
    pub split_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub freeze_timestamps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            freeze_timestamps: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub series: SeriesConfig,
    pub predictor: PredictorConfig,
    pub retention: Retention,
    pub embedding: EmbeddingConfig,
    pub chat: ChatConfig,
    pub trend: TrendConfig,
    pub fusion: FusionConfig,
    pub eval: SplitConfig,
    pub output: OutputConfig,
}

fn positive(name: &str, ok: bool) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive")))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("predictor.window", self.predictor.window > 0)?;
        positive("predictor.k", self.predictor.k > 0)?;
        positive("trend.window", self.trend.window > 0)?;
        positive("trend.lookback", self.trend.lookback > 0)?;
        positive("trend.stable_threshold", self.trend.stable_threshold > 0.0)?;
        if self.trend.significant_threshold <= self.trend.stable_threshold {
            return Err(ConfigError::Invalid(
                "trend.significant_threshold must exceed trend.stable_threshold".into(),
            ));
        }
        positive("fusion.max_steps", self.fusion.max_steps > 0)?;
        positive("fusion.k", self.fusion.k > 0)?;
        if let Some(d) = self.retention.recent_days {
            positive("retention.recent_days", d > 0)?;
        }
        if let Some(s) = self.retention.min_similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(ConfigError::Invalid("retention.min_similarity must lie in [-1, 1]".into()));
            }
        }
        match &self.embedding {
            EmbeddingConfig::Deterministic(h) => {
                positive("embedding.trigram_dim", h.trigram_dim > 0)?;
                positive("embedding.numeric_scale", h.numeric_scale > 0.0)?;
            }
            EmbeddingConfig::Remote(r) => positive("embedding.max_concurrent", r.max_concurrent > 0)?,
        }
        if let ChatConfig::Remote(r) = &self.chat {
            positive("chat.max_concurrent", r.max_concurrent > 0)?;
            positive("chat.timeout_secs", r.timeout_secs > 0)?;
        }
        self.fusion
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            predictor: self.predictor.clone(),
            trend: self.trend.clone(),
            fusion: self.fusion.clone(),
            retention: self.retention.clone(),
        }
    }
}
