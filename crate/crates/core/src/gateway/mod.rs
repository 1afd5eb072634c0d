//! Model inference behind a chat-completions interface.
//!
//! Requests inside a metered batch run strictly one after another so that
//! energy can be attributed to the batch. Token usage is mandatory: it comes
//! from the endpoint's usage report, or from a local tokenizer when the
//! endpoint omits it.

mod http;
mod mock;
mod tokenizer;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::corpus::TaskRecord;
use crate::sandbox::{Sandbox, SandboxError};
use crate::strategy::{
    self, extract_test_script, select_consensus, InteractionPlan, Message, NextRound, Observation, RoundState,
    SelectionRule, StrategyError, StrategyId,
};

pub use http::HttpEndpoint;
pub use mock::{parse_table as parse_mock_table, MockEndpoint, MockEntry, MockError};
pub use tokenizer::{Tokenizer, WordPieceEstimate};

/// Sampling parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub sampling_enabled: bool,
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.2,
            top_p: 0.9,
            max_new_tokens: 1024,
            sampling_enabled: true,
            seed: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must be in (0, 1]", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Identifies one request inside an execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub task_id: u64,
    pub strategy: StrategyId,
    /// Zero-based round index.
    pub turn: u32,
    /// Zero-based sample index within the round.
    pub sample: u32,
}

#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub messages: &'a [Message],
    pub config: &'a GenerationConfig,
    pub seed: Option<u64>,
    pub key: RequestKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{message}")]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        TransportError {
            retryable: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        TransportError {
            retryable: false,
            message: message.into(),
        }
    }
}

pub trait Endpoint: Send + Sync {
    /// Model name reported in records.
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Usage,
    Tokenizer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
    /// Wall (or simulated) seconds including retries.
    pub latency: f64,
    pub endpoint_id: String,
    pub token_source: TokenSource,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint {endpoint}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("endpoint {endpoint} reported no usage and no fallback tokenizer is configured")]
    NoTokenCount { endpoint: String },
    #[error("endpoint {endpoint} reported {output} output tokens, above the cap of {cap}")]
    TokenCapExceeded { endpoint: String, output: u64, cap: u32 },
    #[error("empty message sequence")]
    EmptyMessages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStats {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
}

impl TokenStats {
    pub fn add(&mut self, input: u64, output: u64) {
        self.input_tokens += input;
        self.output_tokens += output;
        self.total_tokens += input + output;
    }

    pub fn merge(&mut self, other: &TokenStats) {
        self.add(other.input_tokens, other.output_tokens);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub round: u32,
    pub sample: u32,
    #[serde(flatten)]
    pub result: CompletionResult,
}

/// Everything sent and received for one strategy execution on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTrace {
    pub task_id: u64,
    pub strategy: StrategyId,
    /// One message sequence per round; every sample of a round shares it.
    pub rendered_prompts: Vec<Vec<Message>>,
    pub completions: Vec<CompletionRecord>,
    pub selected_script: Option<String>,
    /// Index into `completions` of the completion the script came from.
    pub selected_completion: Option<usize>,
    pub rounds_executed: u32,
    pub token_stats: TokenStats,
    pub generation: GenerationConfig,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

pub struct Gateway {
    pub retry: RetryPolicy,
    pub tokenizer: Option<Arc<dyn Tokenizer>>,
    clock: SharedClock,
}

impl Gateway {
    pub fn new(clock: SharedClock) -> Self {
        Gateway {
            retry: RetryPolicy::default(),
            tokenizer: Some(Arc::new(WordPieceEstimate)),
            clock,
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: Option<Arc<dyn Tokenizer>>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// One request with retries and token accounting.
    pub fn complete(
        &self,
        endpoint: &dyn Endpoint,
        messages: &[Message],
        config: &GenerationConfig,
        key: RequestKey,
    ) -> Result<CompletionResult, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyMessages);
        }
        let seed = config.seed.map(|s| s.wrapping_add(u64::from(key.sample)));
        let request = ChatRequest {
            messages,
            config,
            seed,
            key,
        };
        let started = self.clock.now();
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            match endpoint.send(&request) {
                Ok(r) => break r,
                Err(e) if e.retryable && attempt < attempts => {
                    log::warn!(
                        "{}: attempt {attempt}/{attempts} failed ({e}); retrying in {:?}",
                        endpoint.id(),
                        backoff
                    );
                    self.clock.sleep(backoff);
                    backoff *= 2;
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        endpoint: endpoint.id().to_string(),
                        attempts: attempt,
                        message: e.message,
                    })
                }
            }
        };
        let latency = self.clock.now() - started;

        let (input_tokens, output_tokens, token_source) = match response.usage {
            Some(u) => {
                if u.completion_tokens > u64::from(config.max_new_tokens) {
                    return Err(GatewayError::TokenCapExceeded {
                        endpoint: endpoint.id().to_string(),
                        output: u.completion_tokens,
                        cap: config.max_new_tokens,
                    });
                }
                if let Some(total) = u.total_tokens {
                    if total != u.prompt_tokens + u.completion_tokens {
                        log::warn!(
                            "{}: usage total {total} != prompt + completion; using the sum",
                            endpoint.id()
                        );
                    }
                }
                (u.prompt_tokens, u.completion_tokens, TokenSource::Usage)
            }
            None => {
                let tok = self.tokenizer.as_ref().ok_or_else(|| GatewayError::NoTokenCount {
                    endpoint: endpoint.id().to_string(),
                })?;
                let input = tok.count_messages(messages);
                // An estimate can overshoot what the server actually generated.
                let output = tok.count(&response.text).min(u64::from(config.max_new_tokens));
                (input, output, TokenSource::Tokenizer(tok.name().to_string()))
            }
        };
        Ok(CompletionResult {
            text: response.text,
            input_tokens,
            output_tokens,
            total_tokens: input_tokens + output_tokens,
            latency,
            endpoint_id: endpoint.id().to_string(),
            token_source,
        })
    }

    /// Executes every sample and round of a plan and selects the final script.
    ///
    /// Any request failure discards the whole trace.
    pub fn run_trace(
        &self,
        plan: &InteractionPlan,
        task: &TaskRecord,
        config: &GenerationConfig,
        endpoint: &dyn Endpoint,
        sandbox: &dyn Sandbox,
    ) -> Result<InteractionTrace, TraceError> {
        let mut state = RoundState::new(plan);
        let mut rendered_prompts = Vec::new();
        let mut completions: Vec<CompletionRecord> = Vec::new();
        let mut token_stats = TokenStats::default();
        let mut round_start;

        loop {
            let round = state.rounds_executed;
            let messages = state.messages.clone();
            round_start = completions.len();
            for sample in 0..plan.n_samples {
                let key = RequestKey {
                    task_id: task.task_id,
                    strategy: plan.strategy,
                    turn: round,
                    sample,
                };
                let result = self.complete(endpoint, &messages, config, key)?;
                token_stats.add(result.input_tokens, result.output_tokens);
                completions.push(CompletionRecord { round, sample, result });
            }
            rendered_prompts.push(messages);
            state.record_round(&completions[round_start].result.text);

            let observation = if plan.strategy == StrategyId::React && state.rounds_executed < plan.max_rounds {
                Some(match extract_test_script(&completions[round_start].result.text) {
                    Some(script) => sandbox.execute(task, plan.strategy, &script)?.observation(),
                    None => Observation::failed("no test script could be extracted from the previous reply"),
                })
            } else {
                None
            };
            match strategy::next_round(plan, &mut state, observation.as_ref())? {
                NextRound::Terminal => break,
                NextRound::Messages(_) => continue,
            }
        }

        let (selected_completion, selected_script) = match plan.selection_rule {
            SelectionRule::Single | SelectionRule::LastRound => {
                let script = extract_test_script(&completions[round_start].result.text);
                (script.as_ref().map(|_| round_start), script)
            }
            SelectionRule::Consensus => {
                let candidates: Vec<(usize, String)> = completions[round_start..]
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| extract_test_script(&c.result.text).map(|s| (round_start + i, s)))
                    .collect();
                if candidates.is_empty() {
                    (None, None)
                } else {
                    let sources: Vec<&str> = candidates.iter().map(|(_, s)| s.as_str()).collect();
                    let (idx, _) = select_consensus(&sources).expect("candidates checked non-empty");
                    let (completion_idx, script) = candidates[idx].clone();
                    (Some(completion_idx), Some(script))
                }
            }
        };

        Ok(InteractionTrace {
            task_id: task.task_id,
            strategy: plan.strategy,
            rendered_prompts,
            completions,
            selected_script,
            selected_completion,
            rounds_executed: state.rounds_executed,
            token_stats,
            generation: config.clone(),
        })
    }
}
