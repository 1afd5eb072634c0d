//! Experiment configuration, loaded from TOML.
//!
//! Relative paths resolve against the config file's directory. Environment
//! variables may override the output directory
//! (`PROMPTWATT_OUTPUT_DIR`) and endpoint URLs
//! (`PROMPTWATT_ENDPOINT_<MODEL>`, model name upper-cased with every
//! non-alphanumeric character replaced by `_`); nothing else.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{GenerationConfig, RetryPolicy};
use crate::meter::MeterBackendConfig;
use crate::metrics::DEFAULT_ALPHAS;
use crate::strategy::{StrategyId, StrategyParams};

pub const OUTPUT_DIR_ENV: &str = "PROMPTWATT_OUTPUT_DIR";
pub const ENDPOINT_ENV_PREFIX: &str = "PROMPTWATT_ENDPOINT_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_batch_size() -> u32 {
    10
}
fn default_n_batches() -> u32 {
    98
}
fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_strategies() -> Vec<StrategyId> {
    StrategyId::ALL.to_vec()
}
fn default_tokenizer() -> String {
    "word-punct".into()
}
fn default_request_timeout() -> f64 {
    300.0
}
fn default_shim_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Full chat-completions URL.
    #[serde(default)]
    pub url: Option<String>,
    /// Value of the request's `model` field; defaults to `name`.
    #[serde(default)]
    pub served_model: Option<String>,
    /// Response table for a mock endpoint.
    #[serde(default)]
    pub mock_table: Option<PathBuf>,
    /// Simulated decode speed of a mock endpoint.
    #[serde(default)]
    pub tokens_per_second: Option<f64>,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl ModelConfig {
    pub fn endpoint_env_var(&self) -> String {
        let up: String = self
            .name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_uppercase()
                } else {
                    '_'
                }
            })
            .collect();
        format!("{ENDPOINT_ENV_PREFIX}{up}")
    }

    pub fn is_mock(&self) -> bool {
        self.mock_table.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SandboxConfig {
    /// Replays outcomes from a fixture file.
    Recorded { table: PathBuf },
    /// Runs the external coverage shim.
    Shim {
        command: Vec<String>,
        #[serde(default = "default_shim_timeout")]
        timeout_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub attempts: u32,
    pub initial_backoff_s: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            attempts: 3,
            initial_backoff_s: 1.0,
        }
    }
}

impl RetryConfig {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.attempts,
            initial_backoff: std::time::Duration::from_secs_f64(self.initial_backoff_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    #[serde(default = "default_n_batches")]
    pub n_batches: u32,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyId>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Template directory; the built-in set when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub run_challenge_tests: bool,
    /// `word-punct` or `none` (usage reports become mandatory).
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_s: f64,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub strategy: StrategyParams,
    #[serde(default)]
    pub retry: RetryConfig,
    pub models: Vec<ModelConfig>,
    pub meter: MeterBackendConfig,
    pub sandbox: SandboxConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(path, &raw, base, env)
    }

    pub fn parse(
        path: &Path,
        raw: &str,
        base: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if let Some(dir) = env(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        for m in &mut cfg.models {
            if let Some(url) = env(&m.endpoint_env_var()) {
                m.url = Some(url);
                m.mock_table = None;
            }
        }
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(t) = &mut self.templates {
            fix(t);
        }
        for m in &mut self.models {
            if let Some(t) = &mut m.mock_table {
                fix(t);
            }
        }
        if let SandboxConfig::Recorded { table } = &mut self.sandbox {
            fix(table);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.n_batches == 0 {
            return bad("n_batches must be >= 1".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.strategies.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("strategy {dup} listed twice"));
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("alpha {a} must be positive"));
        }
        if !matches!(self.tokenizer.as_str(), "word-punct" | "none") {
            return bad(format!(
                "unknown tokenizer {:?}; expected word-punct or none",
                self.tokenizer
            ));
        }
        if !(self.request_timeout_s > 0.0) {
            return bad("request_timeout_s must be positive".into());
        }
        if self.retry.attempts == 0 || !(self.retry.initial_backoff_s >= 0.0) {
            return bad("retry.attempts must be >= 1 and initial_backoff_s >= 0".into());
        }
        self.generation.validate().map_err(ConfigError::Invalid)?;
        if self.strategy.sc_samples == 0 || self.strategy.react_max_rounds == 0 || self.strategy.fewshot_k == 0 {
            return bad("strategy sc_samples, react_max_rounds and fewshot_k must be >= 1".into());
        }
        if self.models.is_empty() {
            return bad("at least one [[models]] entry is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return bad(format!("model {:?} listed twice", m.name));
            }
            match (&m.url, &m.mock_table) {
                (Some(_), Some(_)) => return bad(format!("model {:?} sets both url and mock_table", m.name)),
                (None, None) => return bad(format!("model {:?} needs url or mock_table", m.name)),
                _ => {}
            }
            if let Some(tps) = m.tokens_per_second {
                if !(tps > 0.0) {
                    return bad(format!("model {:?}: tokens_per_second must be positive", m.name));
                }
            }
        }
        let simulated = self.meter.is_simulated();
        self.meter
            .validate(simulated)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if simulated {
            if let Some(m) = self.models.iter().find(|m| !m.is_mock()) {
                return bad(format!(
                    "simulated meter needs mock endpoints, but model {:?} is a live endpoint",
                    m.name
                ));
            }
            if let Some(m) = self.models.iter().find(|m| m.tokens_per_second.is_none()) {
                return bad(format!(
                    "simulated meter needs tokens_per_second on every mock model (missing on {:?})",
                    m.name
                ));
            }
        }
        if let SandboxConfig::Shim { command, timeout_s } = &self.sandbox {
            if command.is_empty() {
                return bad("sandbox.command must not be empty".into());
            }
            if !(*timeout_s > 0.0) {
                return bad("sandbox.timeout_s must be positive".into());
            }
        }
        Ok(())
    }

    /// Total executions per (model, strategy) pair.
    pub fn executions_per_pair(&self) -> u64 {
        u64::from(self.batch_size) * u64::from(self.n_batches)
    }

    /// Stable identifier of the scientific content of the config. The
    /// output directory does not contribute.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let body = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(body)[..6])
    }
}
