//! Run configuration: one TOML file describing datasets, endpoints and the
//! settings of every metric.
//!
//! ```toml
//! version = 1
//! seed = 7
//! datasets = ["data/train.jsonl"]
//! output_dir = "out"
//!
//! [endpoints.chat]
//! base_url = "mock://mock.jsonl"
//! [endpoints.completion]
//! base_url = "http://localhost:8000/v1"
//! model = "llama-3-8b-dprime"
//! top_k_logprobs = 5
//! [endpoints.embedding]
//! base_url = "mock://mock.jsonl"
//!
//! [cluster]
//! k1 = 6
//!
//! [rtree]
//! alpha = 0.1
//! mode = "per_token"
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. A `base_url` of the form `mock://<path>` selects the scripted mock
//! backend with the given script.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::Strategy;
use crate::exec::Execution;
use crate::gateway::template::ChatTemplate;
use crate::gateway::{EndpointKind, GenerationParams, ModelEndpoint, RetryPolicy};
use crate::rtree::ThresholdMode;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Config field the error refers to, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// `http(s)://...` for a live server or `mock://<script>`.
    pub base_url: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_logprobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token: Option<String>,
}

fn default_model() -> String {
    "default".into()
}

impl EndpointConfig {
    pub fn to_endpoint(&self, kind: EndpointKind) -> ModelEndpoint {
        let mut ep = ModelEndpoint::new(kind, &self.base_url, &self.model);
        let defaults = GenerationParams::default();
        ep.params = GenerationParams {
            max_output_tokens: self.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            top_k_logprobs: self.top_k_logprobs.unwrap_or(defaults.top_k_logprobs),
            temperature: self.temperature.unwrap_or(defaults.temperature),
            stop: self.stop.clone().unwrap_or(defaults.stop),
            eos_token: self.eos_token.clone().unwrap_or(defaults.eos_token),
        };
        if let Some(v) = self.context_length {
            ep.context_length = v;
        }
        if let Some(v) = self.parallelism {
            ep.parallelism = v;
        }
        if let Some(v) = self.timeout_ms {
            ep.timeout_ms = v;
        }
        ep
    }

    /// Script path when this is a mock endpoint.
    pub fn mock_script(&self) -> Option<&str> {
        self.base_url.strip_prefix("mock://")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub chat: Option<EndpointConfig>,
    pub completion: Option<EndpointConfig>,
    pub embedding: Option<EndpointConfig>,
}

impl Endpoints {
    pub fn get(&self, kind: EndpointKind) -> Option<&EndpointConfig> {
        match kind {
            EndpointKind::Chat => self.chat.as_ref(),
            EndpointKind::Completion => self.completion.as_ref(),
            EndpointKind::Embedding => self.embedding.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k1: usize,
    pub exemplars: usize,
    pub max_iter: usize,
    /// File holding the application context paragraph.
    pub context_path: Option<PathBuf>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k1: 8,
            exemplars: 10,
            max_iter: 100,
            context_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationSet {
    /// Full interactions as complete plus one truncated copy of each as
    /// incomplete.
    #[default]
    Truncate,
    /// The dataset as is; every record must carry a `complete` label.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionSection {
    pub strategy: String,
    pub patterns: Vec<String>,
    pub match_window: usize,
    pub strict: bool,
    pub max_continuation_tokens: usize,
    pub empty_is_complete: bool,
    pub evaluation: EvaluationSet,
}

impl Default for CompletionSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::FinetunedContinuation.as_str().into(),
            patterns: crate::completion::default_patterns(),
            match_window: 32,
            strict: false,
            max_continuation_tokens: 64,
            empty_is_complete: true,
            evaluation: EvaluationSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtreeSection {
    pub alpha: f64,
    pub mode: String,
    pub budget: usize,
    pub max_depth: Option<usize>,
    pub bins: usize,
    pub include_cut: bool,
    pub template: ChatTemplate,
}

impl Default for RtreeSection {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: ThresholdMode::PerToken.as_str().into(),
            budget: 256,
            max_depth: None,
            bins: 10,
            include_cut: false,
            template: ChatTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub end_tag: String,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            end_tag: crate::interaction::DEFAULT_END_TAG.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Persistent response cache; `GOALGAUGE_CACHE_DIR` is used when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub no_cache: bool,
    /// Directory of prompt overrides (`<name>.txt`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_template: Option<String>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub completion: CompletionSection,
    #[serde(default)]
    pub rtree: RtreeSection,
    #[serde(default)]
    pub sft: SftSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub mode: Option<String>,
    pub budget: Option<usize>,
    pub top_k: Option<usize>,
    pub strategy: Option<String>,
    pub patterns: Option<Vec<String>>,
    pub max_continuation_tokens: Option<usize>,
    pub k1: Option<usize>,
    pub include_cut: bool,
    pub no_cache: bool,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            ConfigError::Parse(match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}: {message}")
                }
                None => message,
            })
        })?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let config = Self::parse(&text, &base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.alpha {
            self.rtree.alpha = v;
        }
        if let Some(v) = &o.mode {
            self.rtree.mode = v.clone();
        }
        if let Some(v) = o.budget {
            self.rtree.budget = v;
        }
        if let Some(v) = o.top_k {
            if let Some(c) = self.endpoints.completion.as_mut() {
                c.top_k_logprobs = Some(v);
            }
        }
        if let Some(v) = &o.strategy {
            self.completion.strategy = v.clone();
        }
        if let Some(v) = &o.patterns {
            self.completion.patterns = v.clone();
        }
        if let Some(v) = o.max_continuation_tokens {
            self.completion.max_continuation_tokens = v;
        }
        if let Some(v) = o.k1 {
            self.cluster.k1 = v;
        }
        self.rtree.include_cut |= o.include_cut;
        self.no_cache |= o.no_cache;
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn strategy(&self) -> Result<Strategy, ConfigError> {
        self.completion
            .strategy
            .parse()
            .map_err(|e: crate::completion::CompletionError| {
                ConfigError::invalid("completion.strategy", e.to_string())
            })
    }

    pub fn mode(&self) -> Result<ThresholdMode, ConfigError> {
        self.rtree
            .mode
            .parse()
            .map_err(|e: crate::rtree::TreeError| ConfigError::invalid("rtree.mode", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::invalid(
                "version",
                format!(
                    "unsupported config version {} (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        if self.datasets.is_empty() {
            return Err(ConfigError::invalid(
                "datasets",
                "at least one dataset is required",
            ));
        }
        for (name, ep) in [
            ("chat", &self.endpoints.chat),
            ("completion", &self.endpoints.completion),
            ("embedding", &self.endpoints.embedding),
        ] {
            let Some(ep) = ep else { continue };
            let field = |f: &str| format!("endpoints.{name}.{f}");
            let url = ep.base_url.as_str();
            let is_mock = url.starts_with("mock://");
            if !is_mock && !url.starts_with("http://") && !url.starts_with("https://") {
                return Err(ConfigError::invalid(
                    field("base_url"),
                    "must start with http://, https:// or mock://",
                ));
            }
            if is_mock && ep.mock_script().is_some_and(str::is_empty) {
                return Err(ConfigError::invalid(
                    field("base_url"),
                    "mock:// needs a script path",
                ));
            }
            let kind = match name {
                "chat" => EndpointKind::Chat,
                "completion" => EndpointKind::Completion,
                _ => EndpointKind::Embedding,
            };
            if let Err(msg) = ep.to_endpoint(kind).validate() {
                let (f, m) = msg.split_once(' ').unwrap_or((&msg, ""));
                let f = f.trim_start_matches("params.");
                return Err(ConfigError::invalid(field(f), m.trim()));
            }
        }
        if self.cluster.k1 == 0 {
            return Err(ConfigError::invalid("cluster.k1", "must be at least 1"));
        }
        if self.cluster.exemplars == 0 {
            return Err(ConfigError::invalid(
                "cluster.exemplars",
                "must be at least 1",
            ));
        }
        if self.cluster.max_iter == 0 {
            return Err(ConfigError::invalid(
                "cluster.max_iter",
                "must be at least 1",
            ));
        }
        let strategy = self.strategy()?;
        if strategy == Strategy::FinetunedContinuation && self.completion.patterns.is_empty() {
            return Err(ConfigError::invalid(
                "completion.patterns",
                "must not be empty",
            ));
        }
        if self.completion.max_continuation_tokens == 0 {
            return Err(ConfigError::invalid(
                "completion.max_continuation_tokens",
                "must be at least 1",
            ));
        }
        if self.completion.match_window == 0 {
            return Err(ConfigError::invalid(
                "completion.match_window",
                "must be at least 1",
            ));
        }
        let alpha = self.rtree.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ConfigError::invalid(
                "rtree.alpha",
                format!("must lie in (0, 1), got {alpha}"),
            ));
        }
        self.mode()?;
        if self.rtree.budget == 0 {
            return Err(ConfigError::invalid("rtree.budget", "must be at least 1"));
        }
        if self.rtree.max_depth == Some(0) {
            return Err(ConfigError::invalid(
                "rtree.max_depth",
                "must be at least 1",
            ));
        }
        if self.rtree.bins == 0 {
            return Err(ConfigError::invalid("rtree.bins", "must be at least 1"));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::invalid(
                "retry.max_attempts",
                "must be at least 1",
            ));
        }
        if let Some(t) = &self.turn_template {
            if t.matches("{content}").count() != 1 {
                return Err(ConfigError::invalid(
                    "turn_template",
                    "must contain {content} exactly once",
                ));
            }
        }
        Ok(())
    }

    /// Hash of every setting that can influence results. Output and cache
    /// locations are left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("cache_dir");
            obj.remove("no_cache");
            obj.remove("execution");
        }
        crate::rng::sha256_hex(value.to_string())
    }
}
