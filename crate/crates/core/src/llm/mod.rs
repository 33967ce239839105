//! Provider-agnostic chat gateway with token and dollar accounting.

mod http;
mod scripted;

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{CharRatioEstimator, TokenEstimator};

pub use http::{AnthropicProvider, OpenAiProvider};
pub use scripted::{ReplayEntry, ReplayTranscript, ScriptedProvider, REPLY_SEPARATOR};

const DEFAULT_PROFILES: &str = include_str!("../../config/providers.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiKind {
    OpenAi,
    Anthropic,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub model: String,
    pub api: ApiKind,
    pub context_window_tokens: usize,
    pub prompt_price_per_million: f64,
    pub completion_price_per_million: f64,
    /// Overrides the provider's public endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Sampling temperature; provider default when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
}

fn default_max_output() -> u32 {
    4096
}

#[derive(Deserialize)]
struct ProfileTable {
    profiles: Vec<ProviderProfile>,
}

impl ProviderProfile {
    /// Zero-price profile used with replay transcripts.
    pub fn scripted(context_window_tokens: usize) -> Self {
        Self {
            model: "scripted".to_owned(),
            api: ApiKind::Scripted,
            context_window_tokens,
            prompt_price_per_million: 0.0,
            completion_price_per_million: 0.0,
            base_url: None,
            temperature: None,
            max_output_tokens: default_max_output(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.context_window_tokens == 0 {
            return Err(GatewayError::Config(format!("{}: context window must be positive", self.model)));
        }
        let prices = [self.prompt_price_per_million, self.completion_price_per_million];
        if prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GatewayError::Config(format!("{}: prices must be non-negative", self.model)));
        }
        Ok(())
    }
}

/// Parse a price table (`{"profiles": [...]}`).
pub fn parse_profiles(json: &str) -> Result<Vec<ProviderProfile>, GatewayError> {
    let table: ProfileTable =
        serde_json::from_str(json).map_err(|e| GatewayError::Config(format!("price table: {e}")))?;
    for p in &table.profiles {
        p.validate()?;
    }
    Ok(table.profiles)
}

/// The price table shipped with the crate.
pub fn default_profiles() -> Vec<ProviderProfile> {
    parse_profiles(DEFAULT_PROFILES).expect("bundled price table is valid")
}

pub fn find_profile<'a>(profiles: &'a [ProviderProfile], model: &str) -> Option<&'a ProviderProfile> {
    profiles.iter().find(|p| p.model == model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollars: f64,
    pub soft_limit_dollars: f64,
    pub calls: u64,
    pub retries: u64,
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(0.5)
    }
}

impl CostLedger {
    pub fn new(soft_limit_dollars: f64) -> Self {
        Self { prompt_tokens: 0, completion_tokens: 0, dollars: 0.0, soft_limit_dollars, calls: 0, retries: 0 }
    }

    pub fn record(&mut self, usage: Usage, profile: &ProviderProfile) {
        *self = record_usage(self, usage, profile);
    }
}

pub fn call_cost(usage: Usage, profile: &ProviderProfile) -> f64 {
    (usage.prompt_tokens as f64 * profile.prompt_price_per_million
        + usage.completion_tokens as f64 * profile.completion_price_per_million)
        / 1_000_000.0
}

pub fn record_usage(ledger: &CostLedger, usage: Usage, profile: &ProviderProfile) -> CostLedger {
    CostLedger {
        prompt_tokens: ledger.prompt_tokens + usage.prompt_tokens,
        completion_tokens: ledger.completion_tokens + usage.completion_tokens,
        dollars: ledger.dollars + call_cost(usage, profile).max(0.0),
        ..ledger.clone()
    }
}

/// Strict exceedance of the soft limit. Only consulted between iterations.
pub fn over_budget(ledger: &CostLedger) -> bool {
    ledger.dollars > ledger.soft_limit_dollars
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("conversation needs ~{estimated} tokens but the context window is {window}")]
    ContextOverflow { estimated: usize, window: usize },
    #[error("provider returned no usable reply: {0}")]
    ProviderRefusal(String),
    #[error("replay transcript has no more replies")]
    ReplayExhausted,
    #[error("provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProviderReply {
    pub content: String,
    /// Provider-reported usage; estimated by the gateway when absent.
    pub usage: Option<Usage>,
}

pub trait ChatProvider: Send + Sync {
    fn complete(
        &self,
        history: &[ChatMessage],
        profile: &ProviderProfile,
        timeout: Duration,
    ) -> Result<ProviderReply, GatewayError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff: Duration::from_secs(1) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SendOutcome {
    pub message: ChatMessage,
    pub usage: Usage,
    pub retries: u32,
}

pub struct Gateway {
    provider: Box<dyn ChatProvider>,
    profile: ProviderProfile,
    retry: RetryPolicy,
    call_timeout: Duration,
    estimator: Box<dyn TokenEstimator>,
}

impl Gateway {
    pub fn new(provider: Box<dyn ChatProvider>, profile: ProviderProfile) -> Self {
        Self {
            provider,
            profile,
            retry: RetryPolicy::default(),
            call_timeout: Duration::from_secs(300),
            estimator: Box::new(CharRatioEstimator::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_call_timeout(mut self, timeout: Duration) -> Self {
        self.call_timeout = timeout;
        self
    }

    pub fn with_estimator(mut self, estimator: Box<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    pub fn estimate_history(&self, history: &[ChatMessage]) -> usize {
        history.iter().map(|m| self.estimator.estimate(&m.content) + 4).sum()
    }

    /// Send the conversation and record usage on success.
    pub fn send(&self, history: &[ChatMessage], ledger: &mut CostLedger) -> Result<SendOutcome, GatewayError> {
        let estimated = self.estimate_history(history);
        if estimated >= self.profile.context_window_tokens {
            return Err(GatewayError::ContextOverflow { estimated, window: self.profile.context_window_tokens });
        }
        let mut retries = 0;
        let mut backoff = self.retry.initial_backoff;
        let reply = loop {
            match self.provider.complete(history, &self.profile, self.call_timeout) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && retries + 1 < self.retry.max_attempts.max(1) => {
                    log::warn!("{e}; retrying in {backoff:?}");
                    retries += 1;
                    ledger.retries += 1;
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(e) => return Err(e),
            }
        };
        if reply.content.trim().is_empty() {
            return Err(GatewayError::ProviderRefusal("empty reply".to_owned()));
        }
        let usage = reply.usage.unwrap_or_else(|| Usage {
            prompt_tokens: estimated as u64,
            completion_tokens: self.estimator.estimate(&reply.content) as u64,
        });
        ledger.record(usage, &self.profile);
        ledger.calls += 1;
        Ok(SendOutcome { message: ChatMessage::assistant(reply.content), usage, retries })
    }
}
