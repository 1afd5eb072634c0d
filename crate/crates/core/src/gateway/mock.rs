//! Table-driven endpoint for runs without a model server.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::{ChatRequest, ChatResponse, Endpoint, Tokenizer, TransportError, Usage, WordPieceEstimate};
use crate::clock::SharedClock;
use crate::strategy::StrategyId;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("reading mock table {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("mock table {0} has no entries")]
    Empty(PathBuf),
    #[error("tokens_per_second must be positive, got {0}")]
    BadSpeed(f64),
}

/// One table line. Absent key fields match anything.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    #[serde(default)]
    pub task_id: Option<u64>,
    #[serde(default)]
    pub strategy: Option<StrategyId>,
    #[serde(default)]
    pub turn: Option<u32>,
    #[serde(default)]
    pub sample: Option<u32>,
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

impl MockEntry {
    fn specificity(&self, key: &super::RequestKey) -> Option<u8> {
        fn field<T: PartialEq>(want: &Option<T>, got: &T) -> Option<u8> {
            match want {
                None => Some(0),
                Some(w) if w == got => Some(1),
                Some(_) => None,
            }
        }
        Some(
            field(&self.task_id, &key.task_id)? * 8
                + field(&self.strategy, &key.strategy)? * 4
                + field(&self.turn, &key.turn)? * 2
                + field(&self.sample, &key.sample)?,
        )
    }
}

pub struct MockEndpoint {
    id: String,
    entries: Vec<MockEntry>,
    /// Simulated decode speed; infinite means no delay.
    tokens_per_second: f64,
    clock: SharedClock,
}

impl MockEndpoint {
    pub fn new(id: impl Into<String>, entries: Vec<MockEntry>, clock: SharedClock) -> Self {
        MockEndpoint {
            id: id.into(),
            entries,
            tokens_per_second: f64::INFINITY,
            clock,
        }
    }

    pub fn load(id: impl Into<String>, path: &Path, clock: SharedClock) -> Result<Self, MockError> {
        let raw = std::fs::read_to_string(path).map_err(|source| MockError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = parse_table(path, &raw)?;
        Ok(Self::new(id, entries, clock))
    }

    pub fn with_speed(mut self, tokens_per_second: f64) -> Result<Self, MockError> {
        if !(tokens_per_second > 0.0) {
            return Err(MockError::BadSpeed(tokens_per_second));
        }
        self.tokens_per_second = tokens_per_second;
        Ok(self)
    }

    pub fn entries(&self) -> &[MockEntry] {
        &self.entries
    }

    fn lookup(&self, key: &super::RequestKey) -> Option<&MockEntry> {
        let mut best: Option<(u8, &MockEntry)> = None;
        for e in &self.entries {
            if let Some(s) = e.specificity(key) {
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, e));
                }
            }
        }
        best.map(|(_, e)| e)
    }
}

pub fn parse_table(path: &Path, raw: &str) -> Result<Vec<MockEntry>, MockError> {
    let mut entries = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let e: MockEntry = serde_json::from_str(t).map_err(|err| MockError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: err.to_string(),
        })?;
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(MockError::Empty(path.to_path_buf()));
    }
    Ok(entries)
}

impl Endpoint for MockEndpoint {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, TransportError> {
        let entry = self.lookup(&request.key).ok_or_else(|| {
            TransportError::fatal(format!(
                "mock {}: no entry for task {} {} turn {} sample {}",
                self.id, request.key.task_id, request.key.strategy, request.key.turn, request.key.sample
            ))
        })?;
        if self.tokens_per_second.is_finite() {
            let out = entry
                .usage
                .map(|u| u.completion_tokens)
                .unwrap_or_else(|| WordPieceEstimate.count(&entry.text));
            self.clock
                .sleep(Duration::from_secs_f64(out as f64 / self.tokens_per_second));
        }
        Ok(ChatResponse {
            text: entry.text.clone(),
            usage: entry.usage,
        })
    }
}
